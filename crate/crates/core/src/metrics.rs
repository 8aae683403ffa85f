//! Tube quality metrics: Coverage, Tube Volume, Temporal Consistency,
//! Boundary Alignment and Risk-IoU, plus their per-category aggregation.
//!
//! Risky-step sets are compared as unions: an object whose ground truth rises
//! and falls twice inside one horizon is covered only if every risky step is
//! predicted risky, and its boundaries are its first and last risky steps.
//!
//! Only ground-truth risk objects enter Coverage, TC, BA and Risk-IoU. Tube
//! Volume runs over every predicted entry. A ground-truth object missing from
//! the prediction counts as predicted never-risky.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tube::{interval_iou, switch_count, AmbiguityPolicy, DecisionSeq, RiskCategory, RiskTube};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no ground-truth risk objects to evaluate")]
    NoGroundTruthRisk,
    #[error("predicted tube is empty")]
    EmptyTube,
    #[error("sequence lengths differ: prediction {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("ground truth has no risky step; boundaries undefined")]
    NoBoundary,
    #[error("decay constant tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("{pred} predicted tubes for {gt} ground-truth tubes")]
    MisalignedTubes { pred: usize, gt: usize },
}

/// Decay of the boundary weights `exp(-|t - θ| / τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub tau: f64,
}

impl BoundaryConfig {
    pub fn new(tau: f64) -> Result<Self, MetricError> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self { tau })
        } else {
            Err(MetricError::InvalidTau(tau))
        }
    }
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub boundary: BoundaryConfig,
    pub ambiguity: AmbiguityPolicy,
}

fn check_len(pred: &[bool], gt: &[bool]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Whether every ground-truth risky step is predicted risky.
pub fn is_covered(pred: &[bool], gt: &[bool]) -> bool {
    gt.iter().zip(pred).all(|(&g, &p)| !g || p)
}

/// Fraction of ground-truth risk objects whose risky steps are all predicted
/// risky. Ground-truth entries without a risky step are skipped.
pub fn coverage(pred: &RiskTube, gt: &RiskTube) -> Result<f64, MetricError> {
    let mut n = 0usize;
    let mut covered = 0usize;
    for (id, entry) in gt.iter() {
        let g = entry.decisions.risky_mask(gt.policy());
        if !g.contains(&true) {
            continue;
        }
        n += 1;
        let p = pred.risky_mask(id).unwrap_or_else(|| vec![false; g.len()]);
        check_len(&p, &g)?;
        covered += usize::from(is_covered(&p, &g));
    }
    if n == 0 {
        return Err(MetricError::NoGroundTruthRisk);
    }
    Ok(covered as f64 / n as f64)
}

/// Mean number of risky steps per predicted entry.
pub fn tube_volume(pred: &RiskTube) -> Result<f64, MetricError> {
    if pred.is_empty() {
        return Err(MetricError::EmptyTube);
    }
    let total: usize = pred.iter().map(|(_, e)| e.decisions.risky_count(pred.policy())).sum();
    Ok(total as f64 / pred.len() as f64)
}

/// `1 - |T(pred) - T(gt)| / (H - 1)` with `T` the switch count.
pub fn temporal_consistency_masks(pred: &[bool], gt: &[bool]) -> Result<f64, MetricError> {
    check_len(pred, gt)?;
    if pred.len() < 2 {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: 2 });
    }
    let diff = switch_count(pred).abs_diff(switch_count(gt));
    Ok(1.0 - diff as f64 / (pred.len() - 1) as f64)
}

/// Temporal consistency with ambiguous steps counted as risky.
pub fn temporal_consistency(pred: &DecisionSeq, gt: &DecisionSeq) -> Result<f64, MetricError> {
    temporal_consistency_masks(
        &pred.risky_mask(AmbiguityPolicy::Include),
        &gt.risky_mask(AmbiguityPolicy::Include),
    )
}

/// Locally weighted accuracy around step `theta`.
fn weighted_accuracy(pred: &[bool], gt: &[bool], theta: usize, tau: f64) -> f64 {
    let mut miss = 0.0;
    let mut total = 0.0;
    for (t, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        let w = (-(t.abs_diff(theta) as f64) / tau).exp();
        total += w;
        if p != g {
            miss += w;
        }
    }
    1.0 - miss / total
}

/// Mean of the weighted accuracies around the first and last risky
/// ground-truth steps.
pub fn boundary_alignment_masks(pred: &[bool], gt: &[bool], cfg: &BoundaryConfig) -> Result<f64, MetricError> {
    check_len(pred, gt)?;
    let start = gt.iter().position(|&g| g).ok_or(MetricError::NoBoundary)?;
    let end = gt.iter().rposition(|&g| g).expect("a risky step exists");
    let ba = 0.5 * (weighted_accuracy(pred, gt, start, cfg.tau) + weighted_accuracy(pred, gt, end, cfg.tau));
    Ok(ba)
}

pub fn boundary_alignment(pred: &DecisionSeq, gt: &DecisionSeq, cfg: &BoundaryConfig) -> Result<f64, MetricError> {
    boundary_alignment_masks(
        &pred.risky_mask(AmbiguityPolicy::Include),
        &gt.risky_mask(AmbiguityPolicy::Include),
        cfg,
    )
}

/// Interval IoU scaled by the mean of TC and BA.
pub fn risk_iou_masks(pred: &[bool], gt: &[bool], cfg: &BoundaryConfig) -> Result<f64, MetricError> {
    let ba = boundary_alignment_masks(pred, gt, cfg)?;
    let tc = temporal_consistency_masks(pred, gt)?;
    Ok(interval_iou(pred, gt) * (tc + ba) / 2.0)
}

pub fn risk_iou(pred: &DecisionSeq, gt: &DecisionSeq, cfg: &BoundaryConfig) -> Result<f64, MetricError> {
    risk_iou_masks(
        &pred.risky_mask(AmbiguityPolicy::Include),
        &gt.risky_mask(AmbiguityPolicy::Include),
        cfg,
    )
}

/// Aggregates for one risk category. Ratios are `None` when the category has
/// no ground-truth objects; tube volume is `None` without predicted entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub n_objects: usize,
    pub n_predicted: usize,
    pub coverage: Option<f64>,
    pub tube_volume: Option<f64>,
    pub tc: Option<f64>,
    pub ba: Option<f64>,
    pub risk_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_objects: usize,
    pub n_predicted: usize,
    pub coverage: f64,
    pub tube_volume: f64,
    pub tc: f64,
    pub ba: f64,
    pub risk_iou: f64,
    pub per_category: BTreeMap<RiskCategory, CategoryMetrics>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    covered: usize,
    tc: f64,
    ba: f64,
    iou: f64,
    n_pred: usize,
    volume: usize,
}

impl Acc {
    fn ratio(sum: f64, n: usize) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }

    fn category(&self) -> CategoryMetrics {
        CategoryMetrics {
            n_objects: self.n,
            n_predicted: self.n_pred,
            coverage: Self::ratio(self.covered as f64, self.n),
            tube_volume: Self::ratio(self.volume as f64, self.n_pred),
            tc: Self::ratio(self.tc, self.n),
            ba: Self::ratio(self.ba, self.n),
            risk_iou: Self::ratio(self.iou, self.n),
        }
    }
}

/// Per-object metrics averaged over all windows, overall and per category.
///
/// `pred_tubes[i]` and `gt_tubes[i]` must describe the same window. Risk-IoU
/// is computed per object, then averaged.
pub fn evaluate(pred_tubes: &[RiskTube], gt_tubes: &[RiskTube], cfg: &EvalConfig) -> Result<MetricReport, MetricError> {
    if pred_tubes.len() != gt_tubes.len() {
        return Err(MetricError::MisalignedTubes {
            pred: pred_tubes.len(),
            gt: gt_tubes.len(),
        });
    }
    let mut overall = Acc::default();
    let mut per_cat: BTreeMap<RiskCategory, Acc> = BTreeMap::new();
    for (pred, gt) in pred_tubes.iter().zip(gt_tubes) {
        for (_, entry) in pred.iter() {
            let v = entry.decisions.risky_count(cfg.ambiguity);
            overall.n_pred += 1;
            overall.volume += v;
            let a = per_cat.entry(entry.category).or_default();
            a.n_pred += 1;
            a.volume += v;
        }
        for (id, entry) in gt.iter() {
            let g = entry.decisions.risky_mask(AmbiguityPolicy::Exclude);
            if !g.contains(&true) {
                continue;
            }
            let p = pred
                .get(id)
                .map(|e| e.decisions.risky_mask(cfg.ambiguity))
                .unwrap_or_else(|| vec![false; g.len()]);
            check_len(&p, &g)?;
            let covered = usize::from(is_covered(&p, &g));
            let tc = temporal_consistency_masks(&p, &g)?;
            let ba = boundary_alignment_masks(&p, &g, &cfg.boundary)?;
            let iou = interval_iou(&p, &g) * (tc + ba) / 2.0;
            for a in [&mut overall, per_cat.entry(entry.category).or_default()] {
                a.n += 1;
                a.covered += covered;
                a.tc += tc;
                a.ba += ba;
                a.iou += iou;
            }
        }
    }
    if overall.n == 0 {
        return Err(MetricError::NoGroundTruthRisk);
    }
    let n = overall.n as f64;
    Ok(MetricReport {
        n_objects: overall.n,
        n_predicted: overall.n_pred,
        coverage: overall.covered as f64 / n,
        tube_volume: if overall.n_pred == 0 {
            0.0
        } else {
            overall.volume as f64 / overall.n_pred as f64
        },
        tc: overall.tc / n,
        ba: overall.ba / n,
        risk_iou: overall.iou / n,
        per_category: per_cat.into_iter().map(|(c, a)| (c, a.category())).collect(),
    })
}

const METRIC_COLUMNS: [&str; 7] = ["n_objects", "n_predicted", "coverage", "tube_volume", "tc", "ba", "risk_iou"];

impl MetricReport {
    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["method".to_string(), "scenario_set".to_string()];
        h.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        for c in RiskCategory::ALL {
            h.extend(METRIC_COLUMNS.iter().map(|s| format!("{c}_{s}")));
        }
        h
    }

    /// One flat row matching [`MetricReport::csv_header`]; missing
    /// per-category values are empty cells.
    pub fn csv_record(&self, method: &str, scenario_set: &str) -> Vec<String> {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut r = vec![
            method.to_string(),
            scenario_set.to_string(),
            self.n_objects.to_string(),
            self.n_predicted.to_string(),
            self.coverage.to_string(),
            self.tube_volume.to_string(),
            self.tc.to_string(),
            self.ba.to_string(),
            self.risk_iou.to_string(),
        ];
        for c in RiskCategory::ALL {
            match self.per_category.get(&c) {
                Some(m) => r.extend([
                    m.n_objects.to_string(),
                    m.n_predicted.to_string(),
                    opt(m.coverage),
                    opt(m.tube_volume),
                    opt(m.tc),
                    opt(m.ba),
                    opt(m.risk_iou),
                ]),
                None => r.extend(
                    ["0".to_string(), "0".to_string()]
                        .into_iter()
                        .chain(std::iter::repeat_n(String::new(), 5)),
                ),
            }
        }
        r
    }

    /// Writes a header plus one row per `(method, scenario_set, report)`.
    pub fn write_csv<W: Write>(rows: &[(&str, &str, &MetricReport)], out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header())?;
        for (method, set, report) in rows {
            w.write_record(report.csv_record(method, set))?;
        }
        w.flush()?;
        Ok(())
    }
}
