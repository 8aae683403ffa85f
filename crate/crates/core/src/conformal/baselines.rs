use super::{ConformalError, ScoreTube};
use crate::tube::{Decision, DecisionSeq, Origin};

pub const DEFAULT_HARD_THRESHOLD: f64 = 0.5;

/// Fixed-threshold classifier: risky iff `score >= threshold`.
pub fn hard_decision(raw: &ScoreTube, threshold: f64) -> Result<DecisionSeq, ConformalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ConformalError::InvalidThreshold(threshold));
    }
    let mask: Vec<bool> = raw.scores().iter().map(|&p| p >= threshold).collect();
    Ok(DecisionSeq::from_mask(&mask, Origin::HardThreshold))
}

/// Marks every step risky.
pub fn rule_based(raw: &ScoreTube) -> DecisionSeq {
    DecisionSeq::new(vec![Decision::Risk; raw.len()], Origin::RuleBased).expect("no ambiguity")
}
