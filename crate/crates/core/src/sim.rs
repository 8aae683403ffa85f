//! Seeded synthetic driving scenarios.
//!
//! A scenario is a clip of `L` frames holding a few tracked objects. Risk
//! objects carry one ground-truth risk interval placed by a per-category
//! template, surrogate risk scores, and a distance profile that crosses 10 m
//! at the risk onset, lingers inside 10 m for a few frames after the release
//! and then recedes. Distractors never become risky and stay beyond 15 m.
//!
//! Surrogate scores are `clamp(ramp + σ_c·z, 0, 1)` where `ramp` is the
//! ground-truth indicator with a category-specific onset lag and `z` is
//! standard normal. Perception noise (`box_noise`) comes from an independent
//! stream, so a clip generated with and without it shares its clean part.
//!
//! Randomness: ChaCha8 seeded with the scenario seed; stream 0 drives the
//! scenario itself, stream 1 the perception noise. Dataset seeds are the
//! first 8 bytes (little endian) of
//! `SHA-256("risktube/seed/v1" ‖ master ‖ cfg_index ‖ instance)` with each
//! integer encoded as u64 little endian.
//!
//! These clips only reproduce the statistical structure needed to exercise
//! calibration and metrics; their numbers are not measurements of any real
//! driving dataset.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conformal::ScoreTube;
use crate::tube::{Horizon, ObjectId, RiskCategory};

pub const SCENARIO_SCHEMA: &str = "risktube/scenario/v1";

/// Distance below which an approaching risk object is considered close.
pub const APPROACH_CROSSING_M: f64 = 10.0;
const DISTRACTOR_MIN_M: f64 = 15.5;
/// A risk object stays within 10 m for this many frames after its release.
pub const LINGER_FRAMES: (usize, usize) = (2, 5);

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("cannot split {0} scenarios into three non-empty parts")]
    TooFewScenarios(usize),
    #[error("invalid split ratios {0:?}")]
    InvalidRatios((u32, u32, u32)),
    #[error("scenario line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Straight,
    TJunction,
    FourWay,
}

impl Topology {
    /// Approach speed range in metres per frame.
    fn speed_range(self) -> (f64, f64) {
        match self {
            Topology::Straight => (1.5, 2.5),
            Topology::TJunction => (1.0, 2.0),
            Topology::FourWay => (0.8, 1.6),
        }
    }
}

/// Per-category score noise σ_c, plus the noise of distractor objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    pub interaction: f64,
    pub collision: f64,
    pub occlusion: f64,
    pub obstacle: f64,
    pub distractor: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            interaction: 0.10,
            collision: 0.05,
            occlusion: 0.25,
            obstacle: 0.08,
            distractor: 0.05,
        }
    }
}

impl NoiseProfile {
    pub fn noiseless() -> Self {
        Self {
            interaction: 0.0,
            collision: 0.0,
            occlusion: 0.0,
            obstacle: 0.0,
            distractor: 0.0,
        }
    }

    pub fn sigma(&self, c: Option<RiskCategory>) -> f64 {
        match c {
            Some(RiskCategory::Interaction) => self.interaction,
            Some(RiskCategory::Collision) => self.collision,
            Some(RiskCategory::Occlusion) => self.occlusion,
            Some(RiskCategory::Obstacle) => self.obstacle,
            None => self.distractor,
        }
    }

    pub fn set_sigma(&mut self, c: RiskCategory, sigma: f64) {
        match c {
            RiskCategory::Interaction => self.interaction = sigma,
            RiskCategory::Collision => self.collision = sigma,
            RiskCategory::Occlusion => self.occlusion = sigma,
            RiskCategory::Obstacle => self.obstacle = sigma,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            interaction: self.interaction * factor,
            collision: self.collision * factor,
            occlusion: self.occlusion * factor,
            obstacle: self.obstacle * factor,
            distractor: self.distractor * factor,
        }
    }

    fn values(&self) -> [f64; 5] {
        [
            self.interaction,
            self.collision,
            self.occlusion,
            self.obstacle,
            self.distractor,
        ]
    }
}

fn default_box_noise() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_objects: usize,
    pub categories: Vec<RiskCategory>,
    pub topology: Topology,
    #[serde(default)]
    pub horizon: Horizon,
    pub clip_length: usize,
    #[serde(default)]
    pub noise: NoiseProfile,
    #[serde(default = "default_box_noise")]
    pub box_noise: f64,
}

impl ScenarioConfig {
    pub fn single(category: RiskCategory, topology: Topology) -> Self {
        Self {
            n_objects: 2,
            categories: vec![category],
            topology,
            horizon: Horizon::default(),
            clip_length: 40,
            noise: NoiseProfile::default(),
            box_noise: 0.0,
        }
    }

    pub fn multi(categories: Vec<RiskCategory>, topology: Topology) -> Self {
        Self {
            n_objects: categories.len() + 1,
            categories,
            topology,
            horizon: Horizon::default(),
            clip_length: 40,
            noise: NoiseProfile::default(),
            box_noise: 0.0,
        }
    }

    pub fn is_multi(&self) -> bool {
        self.categories.len() >= 2
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.clip_length < self.horizon.len() {
            return bad(format!(
                "clip_length {} is shorter than horizon {}",
                self.clip_length,
                self.horizon.len()
            ));
        }
        if self.n_objects == 0 {
            return bad("n_objects must be at least 1".into());
        }
        if self.n_objects < self.categories.len() {
            return bad(format!(
                "n_objects {} is smaller than the {} risk categories",
                self.n_objects,
                self.categories.len()
            ));
        }
        if self.noise.values().iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise scales must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.box_noise) {
            return bad(format!("box_noise {} outside [0, 1]", self.box_noise));
        }
        Ok(())
    }
}

/// One frame of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: usize,
    pub gt_risk: bool,
    pub score: f64,
    /// `None` only for externally produced data without range measurements.
    pub distance_m: Option<f64>,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: ObjectId,
    pub category: Option<RiskCategory>,
    pub frames: Vec<Frame>,
}

impl ObjectTrack {
    pub fn is_risk_object(&self) -> bool {
        self.frames.iter().any(|f| f.gt_risk)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub objects: Vec<ObjectTrack>,
}

#[derive(Serialize)]
struct WireOut<'a> {
    schema: &'a str,
    id: &'a str,
    seed: u64,
    config: &'a ScenarioConfig,
    objects: &'a [ObjectTrack],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    schema: String,
    id: String,
    seed: u64,
    config: ScenarioConfig,
    objects: Vec<ObjectTrack>,
}

impl Scenario {
    pub fn clip_length(&self) -> usize {
        self.config.clip_length
    }

    pub fn to_json_line(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string(&WireOut {
            schema: SCENARIO_SCHEMA,
            id: &self.id,
            seed: self.seed,
            config: &self.config,
            objects: &self.objects,
        })
    }

    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let w: WireIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if w.schema != SCENARIO_SCHEMA {
            return Err(format!("unsupported schema `{}`, expected `{SCENARIO_SCHEMA}`", w.schema));
        }
        let s = Scenario {
            id: w.id,
            seed: w.seed,
            config: w.config,
            objects: w.objects,
        };
        s.validate()?;
        Ok(s)
    }

    /// Structural checks applied to ingested scenarios.
    pub fn validate(&self) -> Result<(), String> {
        self.config.validate().map_err(|e| e.to_string())?;
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(format!("duplicate object id {}", o.id));
            }
            if o.frames.len() != self.config.clip_length {
                return Err(format!(
                    "object {} has {} frames, clip_length is {}",
                    o.id,
                    o.frames.len(),
                    self.config.clip_length
                ));
            }
            for (i, f) in o.frames.iter().enumerate() {
                if f.t != i {
                    return Err(format!("object {}: frame {i} has t = {}", o.id, f.t));
                }
                if !(0.0..=1.0).contains(&f.score) {
                    return Err(format!("object {} frame {i}: score {} outside [0, 1]", o.id, f.score));
                }
                if let Some(d) = f.distance_m {
                    if !(d > 0.0 && d.is_finite()) {
                        return Err(format!("object {} frame {i}: distance {d} must be positive", o.id));
                    }
                }
            }
            if o.category.is_none() && o.is_risk_object() {
                return Err(format!("risk object {} has no category", o.id));
            }
        }
        Ok(())
    }

    /// Whether every frame carries a distance.
    pub fn has_distances(&self) -> bool {
        self.objects.iter().all(|o| o.frames.iter().all(|f| f.distance_m.is_some()))
    }
}

pub fn write_scenarios<W: Write>(scenarios: &[Scenario], mut out: W) -> Result<(), SimError> {
    for s in scenarios {
        writeln!(out, "{}", s.to_json_line()?)?;
    }
    Ok(())
}

/// Reads JSON-lines scenarios; blank lines are skipped.
pub fn read_scenarios<R: BufRead>(reader: R) -> Result<Vec<Scenario>, SimError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = Scenario::from_json_line(&line).map_err(|msg| SimError::Parse { line: i + 1, msg })?;
        if !seen.insert(s.id.clone()) {
            return Err(SimError::Parse {
                line: i + 1,
                msg: format!("duplicate scenario id `{}`", s.id),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// Frames from the risk onset to the first full-confidence frame.
fn onset_ramp(c: RiskCategory) -> usize {
    match c {
        RiskCategory::Interaction => 3,
        RiskCategory::Collision => 1,
        RiskCategory::Occlusion => 2,
        RiskCategory::Obstacle => 2,
    }
}

fn int_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Inclusive ground-truth interval `[start, end]` in frames.
fn risk_interval(c: RiskCategory, len: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (start, dur) = match c {
        RiskCategory::Interaction => (int_in(rng, len / 4, len / 2), int_in(rng, 5, 9)),
        RiskCategory::Collision => (int_in(rng, len / 2, 3 * len / 4), int_in(rng, 3, 6)),
        RiskCategory::Obstacle => (int_in(rng, 0, len / 4), int_in(rng, len / 2, 3 * len / 4)),
        RiskCategory::Occlusion => (int_in(rng, len / 4, len / 2), int_in(rng, 4, 8)),
    };
    let start = start.min(len - 1);
    (start, (start + dur.max(1) - 1).min(len - 1))
}

/// Noise-free surrogate score of frame `f` for an interval `[a, b]`.
pub fn clean_score(c: RiskCategory, f: usize, a: usize, b: usize) -> f64 {
    if f < a || f > b {
        return 0.0;
    }
    let ramp = onset_ramp(c);
    ((f - a + 1) as f64 / ramp as f64).min(1.0)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Drop probability per frame for a given perception-noise level.
fn drop_probability(box_noise: f64) -> f64 {
    0.3 * box_noise
}

/// Standard deviation of the extra score perturbation.
fn box_score_sigma(box_noise: f64) -> f64 {
    0.5 * box_noise
}

/// Deterministic scenario for `(cfg, seed)`.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64, id: impl Into<String>) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let len = cfg.clip_length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut box_rng = ChaCha8Rng::seed_from_u64(seed);
    box_rng.set_stream(1);
    let (v_lo, v_hi) = cfg.topology.speed_range();

    let mut objects = Vec::with_capacity(cfg.n_objects);
    for idx in 0..cfg.n_objects {
        let category = cfg.categories.get(idx).copied();
        let sigma = cfg.noise.sigma(category);
        let interval = category.map(|c| risk_interval(c, len, &mut rng));
        let (speed, floor, far, drift) = (
            rng.random_range(v_lo..v_hi),
            rng.random_range(2.0..4.0),
            rng.random_range(18.0..40.0),
            rng.random_range(-0.15..0.15),
        );
        let linger = int_in(&mut rng, LINGER_FRAMES.0, LINGER_FRAMES.1);
        let frames = (0..len)
            .map(|f| {
                let (clean, gt, distance) = match (category, interval) {
                    (Some(c), Some((a, b))) => {
                        // inside 10 m exactly on frames a..=b+linger
                        let (f, a, release) = (f as f64, a as f64, (b + linger) as f64);
                        let approach = APPROACH_CROSSING_M + speed * (a - f - 0.5);
                        let recede = APPROACH_CROSSING_M + speed * (f - release - 0.5);
                        let d = approach.max(recede).max(floor);
                        (clean_score(c, f as usize, a as usize, b), f >= a && f <= b as f64, d)
                    }
                    _ => (0.0, false, (far + drift * f as f64).max(DISTRACTOR_MIN_M)),
                };
                let raw = clean + sigma * normal(&mut rng);
                let perturb = box_score_sigma(cfg.box_noise) * normal(&mut box_rng);
                let dropped = box_rng.random::<f64>() < drop_probability(cfg.box_noise);
                Frame {
                    t: f,
                    gt_risk: gt,
                    score: (raw + perturb).clamp(0.0, 1.0),
                    distance_m: Some(distance),
                    dropped,
                }
            })
            .collect();
        objects.push(ObjectTrack {
            id: idx as ObjectId,
            category,
            frames,
        });
    }
    Ok(Scenario {
        id: id.into(),
        seed,
        config: cfg.clone(),
        objects,
    })
}

/// Seed of instance `instance` of config `cfg_index`.
pub fn derive_seed(master_seed: u64, cfg_index: u64, instance: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"risktube/seed/v1");
    h.update(master_seed.to_le_bytes());
    h.update(cfg_index.to_le_bytes());
    h.update(instance.to_le_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

pub fn scenario_id(cfg_index: usize, instance: usize) -> String {
    format!("c{cfg_index:02}-{instance:05}")
}

/// `n_per_cfg` scenarios per config, in config-then-instance order.
pub fn generate_dataset(cfgs: &[ScenarioConfig], n_per_cfg: usize, master_seed: u64) -> Result<Vec<Scenario>, SimError> {
    if n_per_cfg == 0 {
        return Err(SimError::InvalidConfig("n_per_config must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(cfgs.len() * n_per_cfg);
    for (ci, cfg) in cfgs.iter().enumerate() {
        cfg.validate()?;
        for i in 0..n_per_cfg {
            let seed = derive_seed(master_seed, ci as u64, i as u64);
            out.push(generate_scenario(cfg, seed, scenario_id(ci, i))?);
        }
    }
    Ok(out)
}

/// Four single-category configs followed by two two-risk configs.
pub fn default_configs() -> Vec<ScenarioConfig> {
    use RiskCategory::*;
    vec![
        ScenarioConfig::single(Interaction, Topology::FourWay),
        ScenarioConfig::single(Collision, Topology::Straight),
        ScenarioConfig::single(Occlusion, Topology::TJunction),
        ScenarioConfig::single(Obstacle, Topology::Straight),
        ScenarioConfig::multi(vec![Collision, Occlusion], Topology::FourWay),
        ScenarioConfig::multi(vec![Interaction, Obstacle], Topology::TJunction),
    ]
}

/// Dataset description consumed by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_per_config: usize,
    pub scenarios: Vec<ScenarioConfig>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_per_config == 0 {
            return Err(SimError::InvalidConfig("n_per_config must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(SimError::InvalidConfig("scenarios must not be empty".into()));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            s.validate()
                .map_err(|e| SimError::InvalidConfig(format!("scenarios[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn is_multi(&self) -> bool {
        self.scenarios.iter().any(ScenarioConfig::is_multi)
    }
}

/// Disjoint scenario-id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then contiguous train/calibration/test cuts with sizes
/// rounded from the ratios. Calibration and test keep at least one scenario.
pub fn split_dataset(ids: &[String], ratios: (u32, u32, u32), seed: u64) -> Result<DatasetSplit, SimError> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(SimError::InvalidRatios(ratios));
    }
    let n = ids.len();
    if n < 3 {
        return Err(SimError::TooFewScenarios(n));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let share = |r: u32| ((n as f64) * r as f64 / total as f64).round() as usize;
    let n_cal = share(ratios.1).max(1);
    let n_test = share(ratios.2).max(1);
    let n_train = n.saturating_sub(n_cal + n_test);
    let mut train = order[..n_train].to_vec();
    let mut calibration = order[n_train..n_train + n_cal].to_vec();
    let mut test = order[n_train + n_cal..].to_vec();
    train.sort();
    calibration.sort();
    test.sort();
    Ok(DatasetSplit {
        train,
        calibration,
        test,
    })
}

/// One object seen from one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowObject {
    pub id: ObjectId,
    pub category: Option<RiskCategory>,
    /// Ground-truth risk per horizon step.
    pub gt: Vec<bool>,
    /// Scores per step; the hint is the object's true category.
    pub scores: ScoreTube,
    /// Not detected at the window's current frame.
    pub dropped: bool,
}

/// All objects of the window starting at frame `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub objects: Vec<WindowObject>,
}

/// One window per start frame `T ∈ 0..=L-H`, steps re-indexed to `0..H`.
pub fn windows(scenario: &Scenario, horizon: Horizon) -> Vec<Window> {
    let h = horizon.len();
    let len = scenario.clip_length();
    if len < h {
        return Vec::new();
    }
    (0..=len - h)
        .map(|start| Window {
            start,
            objects: scenario
                .objects
                .iter()
                .map(|o| {
                    let frames = &o.frames[start..start + h];
                    WindowObject {
                        id: o.id,
                        category: o.category,
                        gt: frames.iter().map(|f| f.gt_risk).collect(),
                        scores: ScoreTube::new(frames.iter().map(|f| f.score).collect(), o.category)
                            .expect("scenario scores validated in [0, 1]"),
                        dropped: frames[0].dropped,
                    }
                })
                .collect(),
        })
        .collect()
}
