//! Split conformal calibration of per-step risk scores.
//!
//! Each calibration record carries the nonconformity `S_t = |g_t - pred_t|`
//! of one horizon step. A calibrator keeps, per risk category and per step,
//! the sorted calibration scores and the `⌈(n+1)(1-α)⌉`-th smallest of them.
//! At inference a score is labelled risky when `pred >= 1 - q̂`, not risky
//! when `pred <= q̂`, and ambiguous in between (the buffer zone).
//!
//! The effective level of every cell can drift online with the update
//! `α_t ← clamp(α_t + γ(α - err_t), α_min, α_max)`, where `err_t` marks a
//! miscoverage event. With `γ = 0` the calibrator is plain split conformal.

mod baselines;
mod calibrator;
mod classifier;

pub use baselines::{hard_decision, rule_based, DEFAULT_HARD_THRESHOLD};
pub use calibrator::{
    calibrate_tube, fit_category_calibrators, fit_pooled_calibrators, online_update, CalibrationCell, CalibratorConfig,
    CategoryCalibrator, CellFlag,
};
pub use classifier::{classify_category, CategoryClassifier, CentroidModel, TrackFeatures};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tube::{Decision, RiskCategory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("miscoverage level {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("invalid calibrator configuration: {0}")]
    InvalidConfig(String),
    #[error("empty calibration score list")]
    EmptyScores,
    #[error("score tube has {got} steps, calibrator horizon is {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("step {step} outside horizon {horizon}")]
    StepOutOfRange { step: usize, horizon: usize },
    #[error("oracle classification requires a category hint")]
    MissingCategoryHint,
    #[error("centroid classifier has no fitted categories")]
    NoCentroids,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("calibrator state is inconsistent: {0}")]
    CorruptState(String),
}

/// Raw per-step risk scores of one object over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTube {
    scores: Vec<f64>,
    category_hint: Option<RiskCategory>,
}

impl ScoreTube {
    pub fn new(scores: Vec<f64>, category_hint: Option<RiskCategory>) -> Result<Self, ConformalError> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(ConformalError::ScoreOutOfRange(*bad));
        }
        Ok(Self { scores, category_hint })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn category_hint(&self) -> Option<RiskCategory> {
        self.category_hint
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// One calibration observation: category, horizon step, nonconformity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonconformityRecord {
    pub category: RiskCategory,
    pub step: usize,
    pub score: f64,
}

/// `|gt - pred|` for a binary label and a score in `[0, 1]`.
pub fn nonconformity(gt_label: bool, pred_score: f64) -> Result<f64, ConformalError> {
    if !(0.0..=1.0).contains(&pred_score) {
        return Err(ConformalError::ScoreOutOfRange(pred_score));
    }
    Ok((f64::from(u8::from(gt_label)) - pred_score).abs())
}

/// Whether the calibrated prediction set `{y : |y - pred| <= q̂}` contains
/// the true label.
pub fn covers(gt_label: bool, pred_score: f64, q_hat: f64) -> bool {
    (f64::from(u8::from(gt_label)) - pred_score).abs() <= q_hat
}

/// 1-based rank `k = ⌈(n+1)(1-α)⌉` of the conformal quantile.
///
/// The product is nudged down by 1e-9 before the ceiling so that levels such
/// as `α = 0.1` land on the mathematically exact rank despite binary rounding.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidAlpha(alpha))
    }
}

/// Conformal quantile of an already ascending score list; 1.0 when the rank
/// exceeds the sample count.
pub(crate) fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let k = quantile_rank(sorted.len(), alpha);
    if k > sorted.len() {
        1.0
    } else {
        sorted[k - 1]
    }
}

/// Split conformal quantile: the `⌈(n+1)(1-α)⌉`-th smallest score, or the
/// conservative cap 1.0 when there are too few scores for that rank.
pub fn fit_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(ConformalError::ScoreOutOfRange(*bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, alpha))
}

/// Three-way decision for one step.
///
/// When `q̂ >= 0.5` the buffer zone is empty and both thresholds can hold at
/// once; the decision then falls back to thresholding at 0.5.
pub fn calibrate_step(pred_score: f64, q_hat: f64) -> Decision {
    if q_hat >= 0.5 {
        return if pred_score >= 0.5 { Decision::Risk } else { Decision::NoRisk };
    }
    if pred_score >= 1.0 - q_hat {
        Decision::Risk
    } else if pred_score <= q_hat {
        Decision::NoRisk
    } else {
        Decision::Ambiguous
    }
}

/// Buffer zone `[q̂, 1 - q̂]` of one calibrator cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferZone {
    pub lower: f64,
    pub upper: f64,
}

impl BufferZone {
    pub fn from_quantile(q_hat: f64) -> Self {
        Self {
            lower: q_hat,
            upper: 1.0 - q_hat,
        }
    }

    pub fn is_collapsed(&self) -> bool {
        self.lower >= 0.5
    }
}
