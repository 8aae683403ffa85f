//! End-to-end plumbing over simulated scenarios: calibration records, tube
//! prediction per method, evaluation (static or online) and brake gating.
//!
//! Conventions:
//! - calibration and per-step coverage use every detected window of every
//!   object with a known category (the risk objects), whether or not the
//!   window itself contains risk;
//! - ground-truth tubes hold the objects that are risky somewhere in the
//!   window;
//! - predicted tubes hold every detected object; objects without a category
//!   are assigned one by the fallback classifier.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    calibrate_tube, covers, hard_decision, rule_based, CategoryCalibrator, CategoryClassifier, CentroidModel, ConformalError,
    NonconformityRecord, ScoreTube, DEFAULT_HARD_THRESHOLD,
};
use crate::gate::{
    average_brake_count, brake_sequence, distance_baseline, misaligned_brake_count, within_threshold, BrakeSequence, GateConfig,
    GateError,
};
use crate::metrics::{evaluate, EvalConfig, MetricError, MetricReport};
use crate::sim::{windows, DatasetSplit, Scenario, Window, WindowObject};
use crate::tube::{AmbiguityPolicy, DecisionSeq, Horizon, RiskCategory, RiskTube, TubeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Tube(#[from] TubeError),
    #[error("method `{0}` needs a calibrator")]
    MissingCalibrator(Method),
    #[error("scenario `{0}` lacks distance measurements")]
    MissingDistances(String),
    #[error("horizon mismatch: scenario `{scenario}` uses {got}, expected {expected}")]
    HorizonMismatch { scenario: String, expected: usize, got: usize },
    #[error("no scenarios to process")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Hd,
    Rule,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ours, Method::Hd, Method::Rule];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Hd => "hd",
            Method::Rule => "rule",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" => Ok(Method::Ours),
            "hd" => Ok(Method::Hd),
            "rule" => Ok(Method::Rule),
            other => Err(format!("unknown method `{other}` (expected ours, hd or rule)")),
        }
    }
}

/// Everything needed to turn raw scores into a tube.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub method: Method,
    pub calibrator: Option<&'a CategoryCalibrator>,
    /// Assigns categories to objects that carry none.
    pub fallback: &'a CategoryClassifier,
    pub ambiguity: AmbiguityPolicy,
    pub hd_threshold: f64,
}

impl<'a> Predictor<'a> {
    pub fn new(method: Method, calibrator: Option<&'a CategoryCalibrator>, fallback: &'a CategoryClassifier) -> Self {
        Self {
            method,
            calibrator,
            fallback,
            ambiguity: AmbiguityPolicy::Include,
            hd_threshold: DEFAULT_HARD_THRESHOLD,
        }
    }

    pub fn with_ambiguity(mut self, ambiguity: AmbiguityPolicy) -> Self {
        self.ambiguity = ambiguity;
        self
    }

    fn category(&self, o: &WindowObject) -> Result<RiskCategory, ConformalError> {
        match o.category {
            Some(c) => Ok(c),
            None => crate::conformal::classify_category(&o.scores, self.fallback),
        }
    }

    fn decide(
        &self,
        scores: &ScoreTube,
        category: RiskCategory,
        cal: Option<&CategoryCalibrator>,
    ) -> Result<DecisionSeq, PipelineError> {
        Ok(match self.method {
            Method::Ours => calibrate_tube(scores, category, cal.ok_or(PipelineError::MissingCalibrator(Method::Ours))?)?,
            Method::Hd => hard_decision(scores, self.hd_threshold)?,
            Method::Rule => rule_based(scores),
        })
    }

    fn tube_with(&self, window: &Window, horizon: Horizon, cal: Option<&CategoryCalibrator>) -> Result<RiskTube, PipelineError> {
        let mut tube = RiskTube::new(horizon, self.ambiguity);
        for o in window.objects.iter().filter(|o| !o.dropped) {
            let c = self.category(o)?;
            tube.insert(o.id, self.decide(&o.scores, c, cal)?, c)?;
        }
        Ok(tube)
    }

    /// Predicted tube of one window; undetected objects are left out.
    pub fn tube(&self, window: &Window, horizon: Horizon) -> Result<RiskTube, PipelineError> {
        self.tube_with(window, horizon, self.calibrator)
    }
}

/// Ground-truth tube: objects risky at some step of the window.
pub fn gt_tube(window: &Window, horizon: Horizon) -> Result<RiskTube, PipelineError> {
    let mut tube = RiskTube::new(horizon, AmbiguityPolicy::Exclude);
    for o in &window.objects {
        if let (Some(c), true) = (o.category, o.gt.contains(&true)) {
            tube.insert(o.id, DecisionSeq::ground_truth(&o.gt), c)?;
        }
    }
    Ok(tube)
}

fn checked_windows(s: &Scenario, horizon: Horizon) -> Result<Vec<Window>, PipelineError> {
    if s.config.horizon != horizon {
        return Err(PipelineError::HorizonMismatch {
            scenario: s.id.clone(),
            expected: horizon.len(),
            got: s.config.horizon.len(),
        });
    }
    Ok(windows(s, horizon))
}

/// Objects used for calibration and per-step coverage in a window.
fn calibration_objects(w: &Window) -> impl Iterator<Item = (&WindowObject, RiskCategory)> {
    w.objects
        .iter()
        .filter(|o| !o.dropped)
        .filter_map(|o| o.category.map(|c| (o, c)))
}

/// Per-step nonconformity records of the detected risk objects.
pub fn calibration_records(scenarios: &[&Scenario], horizon: Horizon) -> Result<Vec<NonconformityRecord>, PipelineError> {
    let mut out = Vec::new();
    for s in scenarios {
        for w in checked_windows(s, horizon)? {
            for (o, c) in calibration_objects(&w) {
                for (step, (&g, &p)) in o.gt.iter().zip(o.scores.scores()).enumerate() {
                    out.push(NonconformityRecord {
                        category: c,
                        step,
                        score: crate::conformal::nonconformity(g, p)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Centroid classifier fitted on the risk objects' windows.
pub fn fit_fallback_classifier(scenarios: &[&Scenario], horizon: Horizon) -> Result<CentroidModel, PipelineError> {
    let mut samples = Vec::new();
    for s in scenarios {
        for w in checked_windows(s, horizon)? {
            for (o, c) in calibration_objects(&w) {
                samples.push((o.scores.clone(), c));
            }
        }
    }
    Ok(CentroidModel::fit(samples.iter().map(|(t, c)| (t, *c)))?)
}

/// Covered and total per-step counts by category.
pub type StepCounts = BTreeMap<RiskCategory, (usize, usize)>;

/// Per-step coverage `|g - p| <= q̂` of the calibrated prediction sets.
pub fn step_coverage(scenarios: &[&Scenario], cal: &CategoryCalibrator) -> Result<StepCounts, PipelineError> {
    let mut out = StepCounts::new();
    for s in scenarios {
        for w in checked_windows(s, cal.horizon)? {
            for (o, c) in calibration_objects(&w) {
                let e = out.entry(c).or_default();
                for (step, (&g, &p)) in o.gt.iter().zip(o.scores.scores()).enumerate() {
                    e.0 += usize::from(covers(g, p, cal.quantile(c, step)));
                    e.1 += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Pools [`StepCounts`] into one rate.
pub fn pooled_rate(counts: &StepCounts) -> f64 {
    let (c, n) = counts.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

/// Predicted and ground-truth tubes for every window, in order.
pub fn predict_all(
    scenarios: &[&Scenario],
    predictor: &Predictor,
    horizon: Horizon,
) -> Result<(Vec<RiskTube>, Vec<RiskTube>), PipelineError> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in scenarios {
        for w in checked_windows(s, horizon)? {
            pred.push(predictor.tube(&w, horizon)?);
            gt.push(gt_tube(&w, horizon)?);
        }
    }
    Ok((pred, gt))
}

pub fn evaluate_method(
    scenarios: &[&Scenario],
    predictor: &Predictor,
    horizon: Horizon,
    cfg: &EvalConfig,
) -> Result<MetricReport, PipelineError> {
    if scenarios.is_empty() {
        return Err(PipelineError::Empty);
    }
    let (pred, gt) = predict_all(scenarios, predictor, horizon)?;
    Ok(evaluate(&pred, &gt, cfg)?)
}

/// Calibrated evaluation with online updates.
///
/// Windows are swept in order. Each window is predicted with the current
/// state; afterwards every step of every detected risk object updates its
/// (category, step) cell with `err = |g - p| > q̂`. Returns the report and
/// the final state.
pub fn evaluate_online(
    scenarios: &[&Scenario],
    predictor: &Predictor,
    cfg: &EvalConfig,
) -> Result<(MetricReport, CategoryCalibrator), PipelineError> {
    if scenarios.is_empty() {
        return Err(PipelineError::Empty);
    }
    let mut cal = predictor
        .calibrator
        .ok_or(PipelineError::MissingCalibrator(Method::Ours))?
        .clone();
    let horizon = cal.horizon;
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in scenarios {
        for w in checked_windows(s, horizon)? {
            pred.push(predictor.tube_with(&w, horizon, Some(&cal))?);
            gt.push(gt_tube(&w, horizon)?);
            for (o, c) in calibration_objects(&w) {
                for (step, (&g, &p)) in o.gt.iter().zip(o.scores.scores()).enumerate() {
                    let err = !covers(g, p, cal.quantile(c, step));
                    cal.update(c, step, err)?;
                }
            }
        }
    }
    Ok((evaluate(&pred, &gt, cfg)?, cal))
}

/// One observed step of a stream: category, horizon step, label, score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamSample {
    pub category: RiskCategory,
    pub step: usize,
    pub label: bool,
    pub score: f64,
}

/// Coverage outcome of each sample, checked before the sample updates the
/// state. With `gamma = 0` the state never moves (static calibration).
pub fn coverage_trace(cal: &mut CategoryCalibrator, samples: &[StreamSample]) -> Result<Vec<bool>, ConformalError> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let ok = covers(s.label, s.score, cal.quantile(s.category, s.step));
        cal.update(s.category, s.step, !ok)?;
        out.push(ok);
    }
    Ok(out)
}

/// Stream of the detected risk objects' steps in window order.
pub fn stream_samples(scenarios: &[&Scenario], horizon: Horizon) -> Result<Vec<StreamSample>, PipelineError> {
    let mut out = Vec::new();
    for s in scenarios {
        for w in checked_windows(s, horizon)? {
            for (o, c) in calibration_objects(&w) {
                for (step, (&g, &p)) in o.gt.iter().zip(o.scores.scores()).enumerate() {
                    out.push(StreamSample {
                        category: c,
                        step,
                        label: g,
                        score: p,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Brake sequences of one clip for every gating variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBrakes {
    pub scenario: String,
    pub gt: BrakeSequence,
    pub distance: BrakeSequence,
    pub hd: BrakeSequence,
    pub ours: BrakeSequence,
    pub within: Vec<bool>,
}

pub fn clip_brakes(
    scenario: &Scenario,
    cal: &CategoryCalibrator,
    fallback: &CategoryClassifier,
    gate: &GateConfig,
) -> Result<ClipBrakes, PipelineError> {
    if !scenario.has_distances() {
        return Err(PipelineError::MissingDistances(scenario.id.clone()));
    }
    let horizon = cal.horizon;
    let ws = checked_windows(scenario, horizon)?;
    let gated = |method: Method| -> Result<BrakeSequence, PipelineError> {
        let p = Predictor::new(method, Some(cal), fallback).with_ambiguity(gate.ambiguity);
        let tubes = ws.iter().map(|w| p.tube(w, horizon)).collect::<Result<Vec<_>, _>>()?;
        Ok(brake_sequence(scenario, &tubes, gate)?)
    };
    let gt_tubes = ws.iter().map(|w| gt_tube(w, horizon)).collect::<Result<Vec<_>, _>>()?;
    Ok(ClipBrakes {
        scenario: scenario.id.clone(),
        gt: brake_sequence(scenario, &gt_tubes, gate)?,
        distance: distance_baseline(scenario, gate)?,
        hd: gated(Method::Hd)?,
        ours: gated(Method::Ours)?,
        within: within_threshold(scenario, gate)?,
    })
}

/// Average Brake Count and mean Misaligned Brake Count of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeRow {
    pub method: String,
    pub clips: usize,
    pub average_brake_count: f64,
    /// `None` for the ground truth itself.
    pub misaligned_brake_count: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeReport {
    pub rows: Vec<BrakeRow>,
}

impl BrakeReport {
    pub fn row(&self, method: &str) -> Option<&BrakeRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// CSV; the ground-truth row has no MBC and shows "\u{2014}" there.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "clips", "average_brake_count", "misaligned_brake_count"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.clips.to_string(),
                r.average_brake_count.to_string(),
                r.misaligned_brake_count
                    .map_or_else(|| "\u{2014}".to_string(), |m| m.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn brake_report(clips: &[ClipBrakes]) -> Result<BrakeReport, PipelineError> {
    if clips.is_empty() {
        return Err(PipelineError::Empty);
    }
    let gt: Vec<BrakeSequence> = clips.iter().map(|c| c.gt.clone()).collect();
    let mut rows = vec![BrakeRow {
        method: "gt".into(),
        clips: clips.len(),
        average_brake_count: average_brake_count(&gt)?,
        misaligned_brake_count: None,
    }];
    type Pick = fn(&ClipBrakes) -> &BrakeSequence;
    let variants: [(&str, Pick); 3] = [("distance", |c| &c.distance), ("hd", |c| &c.hd), ("ours", |c| &c.ours)];
    for (name, pick) in variants {
        let seqs: Vec<BrakeSequence> = clips.iter().map(|c| pick(c).clone()).collect();
        let mut mbc = 0usize;
        for (p, g) in seqs.iter().zip(&gt) {
            mbc += misaligned_brake_count(p, g)?;
        }
        rows.push(BrakeRow {
            method: name.into(),
            clips: clips.len(),
            average_brake_count: average_brake_count(&seqs)?,
            misaligned_brake_count: Some(mbc as f64 / clips.len() as f64),
        });
    }
    Ok(BrakeReport { rows })
}

/// Scenarios of each split part, in split order.
pub fn partition<'a>(scenarios: &'a [Scenario], split: &DatasetSplit) -> [Vec<&'a Scenario>; 3] {
    let by_id: BTreeMap<&str, &Scenario> = scenarios.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |ids: &[String]| {
        ids.iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect::<Vec<_>>()
    };
    [pick(&split.train), pick(&split.calibration), pick(&split.test)]
}
