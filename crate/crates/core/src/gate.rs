//! Brake gating from risk tubes plus ego distance, and brake-count metrics.
//!
//! Frame `T` brakes iff some object is risky at the step of its tube that
//! describes frame `T` and is closer than the distance threshold at `T`.
//! Windows start at frames `0..=L-H`; frame `T` reads window
//! `min(T, L-H)` at step `T - min(T, L-H)`, so frames up to `L-H` use step 0
//! and the final `H-1` frames read the last window.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Scenario, APPROACH_CROSSING_M};
use crate::tube::{AmbiguityPolicy, ObjectId, RiskTube};

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("expected {expected} window tubes, got {got}")]
    MissingWindow { expected: usize, got: usize },
    #[error("object {object} has no distance at frame {frame}")]
    MissingDistance { object: ObjectId, frame: usize },
    #[error("tube references unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("brake sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no brake sequences to average")]
    Empty,
    #[error("distance threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("clip of {clip} frames is shorter than horizon {horizon}")]
    ClipTooShort { clip: usize, horizon: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrakeSequence(Vec<bool>);

impl BrakeSequence {
    pub fn new(frames: Vec<bool>) -> Self {
        Self(frames)
    }

    pub fn frames(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub distance_threshold: f64,
    pub ambiguity: AmbiguityPolicy,
    /// Extra future steps consulted besides the current one. 0 keeps the
    /// decision on the current frame only.
    pub anticipation_steps: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            distance_threshold: APPROACH_CROSSING_M,
            ambiguity: AmbiguityPolicy::Include,
            anticipation_steps: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.distance_threshold > 0.0 && self.distance_threshold.is_finite()) {
            return Err(GateError::InvalidThreshold(self.distance_threshold));
        }
        Ok(())
    }
}

/// `(window, step)` describing frame `frame` of a clip.
pub fn window_for_frame(frame: usize, clip_length: usize, horizon: usize) -> (usize, usize) {
    let last = clip_length - horizon;
    let w = frame.min(last);
    (w, frame - w)
}

fn distance(scenario: &Scenario, idx: usize, frame: usize) -> Result<f64, GateError> {
    let o = &scenario.objects[idx];
    o.frames[frame]
        .distance_m
        .ok_or(GateError::MissingDistance { object: o.id, frame })
}

fn check_clip(scenario: &Scenario, horizon: usize) -> Result<usize, GateError> {
    let clip = scenario.clip_length();
    if clip < horizon {
        return Err(GateError::ClipTooShort { clip, horizon });
    }
    Ok(clip - horizon + 1)
}

/// Gates every frame of the clip. `tubes[w]` is the tube of window `w`.
pub fn brake_sequence(scenario: &Scenario, tubes: &[RiskTube], cfg: &GateConfig) -> Result<BrakeSequence, GateError> {
    cfg.validate()?;
    let h = scenario.config.horizon.len();
    let n_windows = check_clip(scenario, h)?;
    if tubes.len() != n_windows {
        return Err(GateError::MissingWindow {
            expected: n_windows,
            got: tubes.len(),
        });
    }
    let index: BTreeMap<ObjectId, usize> = scenario.objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let clip = scenario.clip_length();
    let mut out = Vec::with_capacity(clip);
    for frame in 0..clip {
        let (w, step) = window_for_frame(frame, clip, h);
        let last_step = (step + cfg.anticipation_steps).min(h - 1);
        let mut brake = false;
        for (id, entry) in tubes[w].iter() {
            let idx = *index.get(&id).ok_or(GateError::UnknownObject(id))?;
            let risky = entry.decisions.decisions()[step..=last_step]
                .iter()
                .any(|d| d.is_risky(cfg.ambiguity));
            if risky && distance(scenario, idx, frame)? < cfg.distance_threshold {
                brake = true;
                break;
            }
        }
        out.push(brake);
    }
    Ok(BrakeSequence(out))
}

/// Distance-only baseline: brake whenever a detected object is within the
/// threshold. An object counts as detected at frame `T` when it is not
/// dropped at the start of the window that describes `T`.
pub fn distance_baseline(scenario: &Scenario, cfg: &GateConfig) -> Result<BrakeSequence, GateError> {
    cfg.validate()?;
    let h = scenario.config.horizon.len();
    check_clip(scenario, h)?;
    let clip = scenario.clip_length();
    let mut out = Vec::with_capacity(clip);
    for frame in 0..clip {
        let (w, _) = window_for_frame(frame, clip, h);
        let mut brake = false;
        for (idx, o) in scenario.objects.iter().enumerate() {
            if !o.frames[w].dropped && distance(scenario, idx, frame)? < cfg.distance_threshold {
                brake = true;
                break;
            }
        }
        out.push(brake);
    }
    Ok(BrakeSequence(out))
}

/// Whether any object, detected or not, is inside the threshold per frame.
pub fn within_threshold(scenario: &Scenario, cfg: &GateConfig) -> Result<Vec<bool>, GateError> {
    let mut out = vec![false; scenario.clip_length()];
    for (idx, _) in scenario.objects.iter().enumerate() {
        for (frame, slot) in out.iter_mut().enumerate() {
            *slot |= distance(scenario, idx, frame)? < cfg.distance_threshold;
        }
    }
    Ok(out)
}

/// Hamming distance: false-negative plus false-positive brake frames.
pub fn misaligned_brake_count(pred: &BrakeSequence, gt: &BrakeSequence) -> Result<usize, GateError> {
    if pred.len() != gt.len() {
        return Err(GateError::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(pred.0.iter().zip(&gt.0).filter(|(p, g)| p != g).count())
}

/// Mean number of braking frames per clip.
pub fn average_brake_count(seqs: &[BrakeSequence]) -> Result<f64, GateError> {
    if seqs.is_empty() {
        return Err(GateError::Empty);
    }
    Ok(seqs.iter().map(BrakeSequence::count).sum::<usize>() as f64 / seqs.len() as f64)
}

/// Audit trace of one clip: `frame,pred,gt,any_object_within_threshold`.
pub fn write_trace<W: Write>(
    pred: &BrakeSequence,
    gt: &BrakeSequence,
    within: &[bool],
    out: W,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    if pred.len() != gt.len() || within.len() != gt.len() {
        return Err(Box::new(GateError::LengthMismatch(pred.len(), gt.len())));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "pred", "gt", "any_object_within_threshold"])?;
    for (t, ((p, g), d)) in pred.0.iter().zip(&gt.0).zip(within).enumerate() {
        w.write_record([
            t.to_string(),
            u8::from(*p).to_string(),
            u8::from(*g).to_string(),
            u8::from(*d).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, Frame, NoiseProfile, ObjectTrack, ScenarioConfig, Topology};
    use crate::tube::{Decision, DecisionSeq, Horizon, Origin, RiskCategory};
    use proptest::prelude::*;

    /// One object, clip length `len`, given distances and nothing risky.
    fn scenario(distances: &[f64]) -> Scenario {
        let mut cfg = ScenarioConfig::single(RiskCategory::Collision, Topology::Straight);
        cfg.clip_length = distances.len();
        cfg.n_objects = 1;
        let frames = distances
            .iter()
            .enumerate()
            .map(|(t, &d)| Frame {
                t,
                gt_risk: false,
                score: 0.0,
                distance_m: Some(d),
                dropped: false,
            })
            .collect();
        Scenario {
            id: "s".into(),
            seed: 0,
            config: cfg,
            objects: vec![ObjectTrack {
                id: 0,
                category: Some(RiskCategory::Collision),
                frames,
            }],
        }
    }

    fn tubes_with(s: &Scenario, step0_risky: impl Fn(usize) -> bool) -> Vec<RiskTube> {
        let h = Horizon::default();
        (0..=s.clip_length() - h.len())
            .map(|w| {
                let mut tube = RiskTube::new(h, AmbiguityPolicy::Include);
                // step k of window w describes frame w + k
                let mask: Vec<bool> = (0..h.len()).map(|k| step0_risky(w + k)).collect();
                tube.insert(0, DecisionSeq::from_mask(&mask, Origin::Calibrated), RiskCategory::Collision)
                    .unwrap();
                tube
            })
            .collect()
    }

    fn rule_tubes(s: &Scenario) -> Vec<RiskTube> {
        tubes_with(s, |_| true)
    }

    #[test]
    fn window_mapping() {
        assert_eq!(window_for_frame(0, 20, 8), (0, 0));
        assert_eq!(window_for_frame(12, 20, 8), (12, 0));
        assert_eq!(window_for_frame(13, 20, 8), (12, 1));
        assert_eq!(window_for_frame(19, 20, 8), (12, 7));
    }

    #[test]
    fn far_objects_never_brake() {
        let s = scenario(&[30.0; 16]);
        let b = brake_sequence(&s, &rule_tubes(&s), &GateConfig::default()).unwrap();
        assert_eq!(b.count(), 0);
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn flags_intersect_distance() {
        let mut d = vec![20.0; 16];
        d[4] = 8.0;
        d[5] = 8.0;
        d[6] = 12.0;
        let s = scenario(&d);
        let tubes = tubes_with(&s, |f| (2..=5).contains(&f));
        let b = brake_sequence(&s, &tubes, &GateConfig::default()).unwrap();
        let on: Vec<usize> = (0..16).filter(|&t| b.frames()[t]).collect();
        assert_eq!(on, vec![4, 5]);
    }

    #[test]
    fn ambiguity_policy_applies() {
        let s = scenario(&[5.0; 10]);
        let h = Horizon::default();
        let tubes: Vec<RiskTube> = (0..3)
            .map(|_| {
                let mut t = RiskTube::new(h, AmbiguityPolicy::Include);
                let d = DecisionSeq::new(vec![Decision::Ambiguous; 8], Origin::Calibrated).unwrap();
                t.insert(0, d, RiskCategory::Collision).unwrap();
                t
            })
            .collect();
        let inc = brake_sequence(&s, &tubes, &GateConfig::default()).unwrap();
        assert_eq!(inc.count(), 10);
        let exc = GateConfig {
            ambiguity: AmbiguityPolicy::Exclude,
            ..GateConfig::default()
        };
        assert_eq!(brake_sequence(&s, &tubes, &exc).unwrap().count(), 0);
    }

    #[test]
    fn anticipation_looks_ahead() {
        let mut d = vec![5.0; 16];
        d[0] = 20.0;
        let s = scenario(&d);
        let tubes = tubes_with(&s, |f| f == 3);
        let now = brake_sequence(&s, &tubes, &GateConfig::default()).unwrap();
        assert_eq!(now.count(), 1);
        let ahead = GateConfig {
            anticipation_steps: 2,
            ..GateConfig::default()
        };
        let b = brake_sequence(&s, &tubes, &ahead).unwrap();
        let on: Vec<usize> = (0..16).filter(|&t| b.frames()[t]).collect();
        assert_eq!(on, vec![1, 2, 3]);
    }

    #[test]
    fn errors() {
        let s = scenario(&[5.0; 10]);
        let tubes = rule_tubes(&s);
        assert_eq!(
            brake_sequence(&s, &tubes[..2], &GateConfig::default()),
            Err(GateError::MissingWindow { expected: 3, got: 2 })
        );
        let mut no_d = s.clone();
        no_d.objects[0].frames[4].distance_m = None;
        assert_eq!(
            brake_sequence(&no_d, &tubes, &GateConfig::default()),
            Err(GateError::MissingDistance { object: 0, frame: 4 })
        );
        let bad = GateConfig {
            distance_threshold: 0.0,
            ..GateConfig::default()
        };
        assert!(brake_sequence(&s, &tubes, &bad).is_err());
        assert_eq!(average_brake_count(&[]), Err(GateError::Empty));
        let a = BrakeSequence::new(vec![true; 3]);
        let b = BrakeSequence::new(vec![true; 4]);
        assert_eq!(misaligned_brake_count(&a, &b), Err(GateError::LengthMismatch(3, 4)));
    }

    #[test]
    fn brake_count_examples() {
        let p = BrakeSequence::new(vec![false, true, true, false]);
        let g = BrakeSequence::new(vec![false, false, true, true]);
        assert_eq!(misaligned_brake_count(&p, &g).unwrap(), 2);
        assert_eq!(misaligned_brake_count(&p, &p).unwrap(), 0);
        let g: Vec<bool> = (0..20).map(|t| t % 3 == 0).collect();
        let c: Vec<bool> = g.iter().map(|b| !b).collect();
        assert_eq!(
            misaligned_brake_count(&BrakeSequence::new(c), &BrakeSequence::new(g)).unwrap(),
            20
        );
        let ten = BrakeSequence::new((0..30).map(|t| t < 10).collect());
        let twenty = BrakeSequence::new((0..30).map(|t| t < 20).collect());
        assert_eq!(average_brake_count(&[ten, twenty]).unwrap(), 15.0);
        assert_eq!(average_brake_count(&[BrakeSequence::new(vec![false; 5])]).unwrap(), 0.0);
    }

    #[test]
    fn rule_tubes_equal_distance_baseline_on_generated_clips() {
        for seed in 0..20 {
            let mut cfg = ScenarioConfig::multi(vec![RiskCategory::Obstacle, RiskCategory::Occlusion], Topology::FourWay);
            cfg.box_noise = 0.3;
            cfg.noise = NoiseProfile::default();
            let s = generate_scenario(&cfg, seed, "x").unwrap();
            let h = cfg.horizon;
            let tubes: Vec<RiskTube> = crate::sim::windows(&s, h)
                .iter()
                .map(|w| {
                    let mut t = RiskTube::new(h, AmbiguityPolicy::Include);
                    for o in w.objects.iter().filter(|o| !o.dropped) {
                        let seq = DecisionSeq::from_mask(&[true; 8], Origin::RuleBased);
                        t.insert(o.id, seq, o.category.unwrap_or(RiskCategory::Interaction)).unwrap();
                    }
                    t
                })
                .collect();
            let g = GateConfig::default();
            assert_eq!(brake_sequence(&s, &tubes, &g).unwrap(), distance_baseline(&s, &g).unwrap());
        }
    }

    #[test]
    fn trace_csv() {
        let p = BrakeSequence::new(vec![true, false]);
        let g = BrakeSequence::new(vec![false, false]);
        let mut buf = Vec::new();
        write_trace(&p, &g, &[true, true], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "frame,pred,gt,any_object_within_threshold\n0,1,0,1\n1,0,0,1\n"
        );
    }

    fn seq_strategy(len: usize) -> impl Strategy<Value = Vec<bool>> {
        proptest::collection::vec(any::<bool>(), len)
    }

    proptest! {
        #[test]
        fn mbc_is_a_metric((a, b, c) in (1usize..40).prop_flat_map(|n| (seq_strategy(n), seq_strategy(n), seq_strategy(n)))) {
            let (a, b, c) = (BrakeSequence::new(a), BrakeSequence::new(b), BrakeSequence::new(c));
            let ab = misaligned_brake_count(&a, &b).unwrap();
            prop_assert_eq!(ab, misaligned_brake_count(&b, &a).unwrap());
            prop_assert_eq!(misaligned_brake_count(&a, &a).unwrap(), 0);
            let ac = misaligned_brake_count(&a, &c).unwrap();
            let cb = misaligned_brake_count(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb);
        }

        #[test]
        fn removing_flags_never_adds_brakes(
            d in proptest::collection::vec(1.0f64..20.0, 8..30),
            flags in proptest::collection::vec(any::<bool>(), 30),
            keep in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let s = scenario(&d);
            let full = tubes_with(&s, |f| flags[f]);
            let shrunk = tubes_with(&s, |f| flags[f] && keep[f]);
            let g = GateConfig::default();
            let a = brake_sequence(&s, &full, &g).unwrap();
            let b = brake_sequence(&s, &shrunk, &g).unwrap();
            prop_assert!(b.count() <= a.count());
            prop_assert!(b.frames().iter().zip(a.frames()).all(|(x, y)| !x || *y));
        }
    }
}
