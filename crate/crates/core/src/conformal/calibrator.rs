use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{calibrate_step, check_alpha, quantile_of_sorted, quantile_rank, ConformalError, NonconformityRecord, ScoreTube};
use crate::tube::{DecisionSeq, Horizon, Origin, RiskCategory};

/// Calibration settings shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratorConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.01,
            alpha_min: 0.01,
            alpha_max: 0.5,
        }
    }
}

impl CalibratorConfig {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        Self {
            alpha,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConformalError> {
        check_alpha(self.alpha)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(ConformalError::InvalidConfig(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.alpha_min > 0.0 && self.alpha_max < 1.0) {
            return Err(ConformalError::InvalidConfig(format!(
                "alpha bounds [{}, {}] must lie inside (0, 1)",
                self.alpha_min, self.alpha_max
            )));
        }
        if !(self.alpha_min <= self.alpha && self.alpha <= self.alpha_max) {
            return Err(ConformalError::InvalidConfig(format!(
                "alpha {} outside [{}, {}]",
                self.alpha, self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }
}

/// Why a cell's quantile sits at the conservative cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFlag {
    /// No calibration record for this (category, step).
    NoRecords,
    /// Fewer records than the conformal rank at the current level.
    InsufficientSamples,
}

/// Calibration state of one (category, step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCell {
    /// Ascending.
    pub scores: Vec<f64>,
    pub quantile: f64,
    pub effective_alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<CellFlag>,
}

impl CalibrationCell {
    fn fit(mut scores: Vec<f64>, alpha: f64) -> Self {
        scores.sort_by(f64::total_cmp);
        let mut cell = Self {
            scores,
            quantile: 1.0,
            effective_alpha: alpha,
            flag: None,
        };
        cell.refresh();
        cell
    }

    fn refresh(&mut self) {
        if self.scores.is_empty() {
            self.quantile = 1.0;
            self.flag = Some(CellFlag::NoRecords);
            return;
        }
        self.quantile = quantile_of_sorted(&self.scores, self.effective_alpha);
        self.flag =
            (quantile_rank(self.scores.len(), self.effective_alpha) > self.scores.len()).then_some(CellFlag::InsufficientSamples);
    }
}

/// Per-category, per-step conformal quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCalibrator {
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub horizon: Horizon,
    pub cells: BTreeMap<RiskCategory, Vec<CalibrationCell>>,
}

/// Fits one cell per (category, step) from that group's records only.
///
/// Groups without records get the cap 1.0 and are flagged; steps outside the
/// horizon are ignored.
pub fn fit_category_calibrators(
    records: &[NonconformityRecord],
    horizon: Horizon,
    cfg: CalibratorConfig,
) -> Result<CategoryCalibrator, ConformalError> {
    cfg.validate()?;
    let mut groups: BTreeMap<RiskCategory, Vec<Vec<f64>>> = RiskCategory::ALL
        .into_iter()
        .map(|c| (c, vec![Vec::new(); horizon.len()]))
        .collect();
    for r in records {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(ConformalError::ScoreOutOfRange(r.score));
        }
        if r.step < horizon.len() {
            groups.get_mut(&r.category).expect("all categories present")[r.step].push(r.score);
        }
    }
    let cells = groups
        .into_iter()
        .map(|(c, steps)| {
            let cells: Vec<_> = steps.into_iter().map(|s| CalibrationCell::fit(s, cfg.alpha)).collect();
            (c, cells)
        })
        .collect();
    let cal = CategoryCalibrator::from_parts(cfg, horizon, cells);
    cal.warn_flagged();
    Ok(cal)
}

/// Category-blind baseline: every category receives the quantile fitted on
/// all records of that step.
pub fn fit_pooled_calibrators(
    records: &[NonconformityRecord],
    horizon: Horizon,
    cfg: CalibratorConfig,
) -> Result<CategoryCalibrator, ConformalError> {
    let mut pooled = Vec::with_capacity(records.len() * RiskCategory::ALL.len());
    for c in RiskCategory::ALL {
        pooled.extend(records.iter().map(|r| NonconformityRecord { category: c, ..*r }));
    }
    fit_category_calibrators(&pooled, horizon, cfg)
}

impl CategoryCalibrator {
    fn from_parts(cfg: CalibratorConfig, horizon: Horizon, cells: BTreeMap<RiskCategory, Vec<CalibrationCell>>) -> Self {
        Self {
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            alpha_min: cfg.alpha_min,
            alpha_max: cfg.alpha_max,
            horizon,
            cells,
        }
    }

    pub fn config(&self) -> CalibratorConfig {
        CalibratorConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
        }
    }

    fn warn_flagged(&self) {
        for (c, cells) in &self.cells {
            if cells.iter().all(|cell| cell.flag == Some(CellFlag::NoRecords)) {
                warn!("no calibration records for {c}; all its quantiles capped at 1.0");
                continue;
            }
            for (t, cell) in cells.iter().enumerate() {
                match cell.flag {
                    Some(CellFlag::NoRecords) => {
                        warn!("no calibration records for {c} step {t}; quantile capped at 1.0")
                    }
                    Some(CellFlag::InsufficientSamples) => warn!(
                        "{} records for {c} step {t} are too few for alpha {}; quantile capped at 1.0",
                        cell.scores.len(),
                        cell.effective_alpha
                    ),
                    None => {}
                }
            }
        }
    }

    pub fn cell(&self, category: RiskCategory, step: usize) -> Option<&CalibrationCell> {
        self.cells.get(&category).and_then(|v| v.get(step))
    }

    /// Current quantile; 1.0 for unknown cells.
    pub fn quantile(&self, category: RiskCategory, step: usize) -> f64 {
        self.cell(category, step).map_or(1.0, |c| c.quantile)
    }

    pub fn effective_alpha(&self, category: RiskCategory, step: usize) -> Option<f64> {
        self.cell(category, step).map(|c| c.effective_alpha)
    }

    /// (category, step) pairs whose quantile sits at the cap.
    pub fn flagged(&self) -> Vec<(RiskCategory, usize, CellFlag)> {
        self.cells
            .iter()
            .flat_map(|(c, cells)| {
                cells
                    .iter()
                    .enumerate()
                    .filter_map(move |(t, cell)| cell.flag.map(|f| (*c, t, f)))
            })
            .collect()
    }

    /// Applies the adaptive level update to one cell in place.
    pub fn update(&mut self, category: RiskCategory, step: usize, err: bool) -> Result<(), ConformalError> {
        let horizon = self.horizon.len();
        let (gamma, alpha, lo, hi) = (self.gamma, self.alpha, self.alpha_min, self.alpha_max);
        let cell = self
            .cells
            .get_mut(&category)
            .and_then(|v| v.get_mut(step))
            .ok_or(ConformalError::StepOutOfRange { step, horizon })?;
        if gamma == 0.0 {
            return Ok(());
        }
        let err = f64::from(u8::from(err));
        cell.effective_alpha = (cell.effective_alpha + gamma * (alpha - err)).clamp(lo, hi);
        cell.refresh();
        Ok(())
    }

    /// Checks the structural invariants after deserialisation.
    pub fn validate(&self) -> Result<(), ConformalError> {
        self.config().validate()?;
        for (c, cells) in &self.cells {
            if cells.len() != self.horizon.len() {
                return Err(ConformalError::CorruptState(format!(
                    "{c} has {} cells for horizon {}",
                    cells.len(),
                    self.horizon.len()
                )));
            }
            for (t, cell) in cells.iter().enumerate() {
                if cell.scores.windows(2).any(|w| w[0] > w[1]) {
                    return Err(ConformalError::CorruptState(format!("{c} step {t}: scores not ascending")));
                }
                if cell.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(ConformalError::CorruptState(format!("{c} step {t}: score outside [0, 1]")));
                }
                if cell.quantile != 1.0 && !cell.scores.contains(&cell.quantile) {
                    return Err(ConformalError::CorruptState(format!(
                        "{c} step {t}: quantile {} is neither a score nor the cap",
                        cell.quantile
                    )));
                }
                if !(self.alpha_min..=self.alpha_max).contains(&cell.effective_alpha) {
                    return Err(ConformalError::CorruptState(format!(
                        "{c} step {t}: effective alpha {} outside bounds",
                        cell.effective_alpha
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let cal: Self = serde_json::from_str(s)?;
        cal.validate()?;
        Ok(cal)
    }
}

/// Returns a new calibrator with one cell's level updated after observing a
/// step whose nonconformity exceeded (`err = true`) or stayed within the
/// current quantile.
pub fn online_update(
    cal: &CategoryCalibrator,
    category: RiskCategory,
    step: usize,
    err: bool,
) -> Result<CategoryCalibrator, ConformalError> {
    let mut next = cal.clone();
    next.update(category, step, err)?;
    Ok(next)
}

/// Applies the per-step rule with the category's current quantiles.
pub fn calibrate_tube(raw: &ScoreTube, category: RiskCategory, cal: &CategoryCalibrator) -> Result<DecisionSeq, ConformalError> {
    if raw.len() != cal.horizon.len() {
        return Err(ConformalError::LengthMismatch {
            expected: cal.horizon.len(),
            got: raw.len(),
        });
    }
    let decisions = raw
        .scores()
        .iter()
        .enumerate()
        .map(|(t, &p)| calibrate_step(p, cal.quantile(category, t)))
        .collect();
    Ok(DecisionSeq::new(decisions, Origin::Calibrated).expect("calibrated origin accepts ambiguity"))
}
