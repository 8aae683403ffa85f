//! Conformal risk tubes: per-object future risk intervals with calibrated
//! coverage, their evaluation metrics, a seeded scenario simulator and
//! downstream brake gating.

pub mod conformal;
pub mod gate;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod stfa;
pub mod tube;
