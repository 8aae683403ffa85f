//! Horizons, per-step decision sequences, risk intervals and risk tubes.
//!
//! Timesteps are indices `0..H` relative to the current frame. Intervals are
//! inclusive on both ends, so an interval's length is `end - start + 1` and a
//! tube's volume is a plain timestep count.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of future timesteps in a tube.
pub const DEFAULT_HORIZON: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TubeError {
    #[error("horizon must be at least 2 steps, got {0}")]
    HorizonTooShort(usize),
    #[error("decision sequence has {got} steps, horizon is {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("ground-truth sequences cannot contain ambiguous steps (step {0})")]
    AmbiguousGroundTruth(usize),
    #[error("invalid interval [{start}, {end}] for horizon {horizon}")]
    InvalidInterval { start: usize, end: usize, horizon: usize },
}

/// Number of future timesteps covered by a tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(length: usize) -> Result<Self, TubeError> {
        if length < 2 {
            return Err(TubeError::HorizonTooShort(length));
        }
        Ok(Self(length))
    }

    pub fn len(self) -> usize {
        self.0
    }

    /// Horizons are never empty; present for clippy's `len_without_is_empty`.
    pub fn is_empty(self) -> bool {
        false
    }

    pub fn steps(self) -> std::ops::Range<usize> {
        0..self.0
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self(DEFAULT_HORIZON)
    }
}

impl TryFrom<usize> for Horizon {
    type Error = TubeError;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Horizon> for usize {
    fn from(h: Horizon) -> usize {
        h.0
    }
}

/// The four risk categories of the scenario taxonomy.
///
/// Variant order is significant: it is the tie-break order wherever two
/// categories compare equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskCategory {
    Interaction,
    Collision,
    Occlusion,
    Obstacle,
}

impl RiskCategory {
    pub const ALL: [RiskCategory; 4] = [
        RiskCategory::Interaction,
        RiskCategory::Collision,
        RiskCategory::Occlusion,
        RiskCategory::Obstacle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskCategory::Interaction => "interaction",
            RiskCategory::Collision => "collision",
            RiskCategory::Occlusion => "occlusion",
            RiskCategory::Obstacle => "obstacle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RiskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RiskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RiskCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown risk category `{s}`"))
    }
}

/// Per-step decision of a tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Risk,
    NoRisk,
    /// Score fell inside the calibrated buffer zone.
    Ambiguous,
}

impl Decision {
    pub fn is_risky(self, policy: AmbiguityPolicy) -> bool {
        match self {
            Decision::Risk => true,
            Decision::NoRisk => false,
            Decision::Ambiguous => policy == AmbiguityPolicy::Include,
        }
    }

    /// Ordinal with NoRisk < Ambiguous < Risk.
    pub fn rank(self) -> u8 {
        match self {
            Decision::NoRisk => 0,
            Decision::Ambiguous => 1,
            Decision::Risk => 2,
        }
    }
}

/// How ambiguous steps are counted when a sequence is reduced to risky steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityPolicy {
    #[default]
    Include,
    Exclude,
}

impl std::str::FromStr for AmbiguityPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "include" => Ok(Self::Include),
            "exclude" => Ok(Self::Exclude),
            other => Err(format!("unknown ambiguity policy `{other}`")),
        }
    }
}

/// Which procedure produced a decision sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    GroundTruth,
    Calibrated,
    HardThreshold,
    RuleBased,
}

/// Per-step decisions over the horizon, tagged with their origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSeq {
    decisions: Vec<Decision>,
    origin: Origin,
}

impl DecisionSeq {
    pub fn new(decisions: Vec<Decision>, origin: Origin) -> Result<Self, TubeError> {
        if origin == Origin::GroundTruth {
            if let Some(t) = decisions.iter().position(|d| *d == Decision::Ambiguous) {
                return Err(TubeError::AmbiguousGroundTruth(t));
            }
        }
        Ok(Self { decisions, origin })
    }

    /// Ground truth from per-step binary labels.
    pub fn ground_truth(labels: &[bool]) -> Self {
        Self::from_mask(labels, Origin::GroundTruth)
    }

    pub fn from_mask(mask: &[bool], origin: Origin) -> Self {
        let decisions = mask
            .iter()
            .map(|&r| if r { Decision::Risk } else { Decision::NoRisk })
            .collect();
        Self { decisions, origin }
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    /// Per-step risky flags under `policy`.
    pub fn risky_mask(&self, policy: AmbiguityPolicy) -> Vec<bool> {
        self.decisions.iter().map(|d| d.is_risky(policy)).collect()
    }

    pub fn risky_count(&self, policy: AmbiguityPolicy) -> usize {
        self.decisions.iter().filter(|d| d.is_risky(policy)).count()
    }

    pub fn has_risk(&self, policy: AmbiguityPolicy) -> bool {
        self.decisions.iter().any(|d| d.is_risky(policy))
    }
}

/// Inclusive timestep interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RiskInterval {
    start: usize,
    end: usize,
}

impl RiskInterval {
    pub fn new(start: usize, end: usize, horizon: Horizon) -> Result<Self, TubeError> {
        if start > end || end >= horizon.len() {
            return Err(TubeError::InvalidInterval {
                start,
                end,
                horizon: horizon.len(),
            });
        }
        Ok(Self { start, end })
    }

    pub fn start(self) -> usize {
        self.start
    }

    pub fn end(self) -> usize {
        self.end
    }

    pub fn len(self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

/// Maximal runs of risky steps, in ascending order.
pub fn intervals_from_decisions(seq: &DecisionSeq, policy: AmbiguityPolicy) -> Vec<RiskInterval> {
    intervals_from_mask(&seq.risky_mask(policy))
}

pub(crate) fn intervals_from_mask(mask: &[bool]) -> Vec<RiskInterval> {
    let mut out = Vec::new();
    let mut run_start = None;
    for (t, &risky) in mask.iter().enumerate() {
        match (risky, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(s)) => {
                out.push(RiskInterval { start: s, end: t - 1 });
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        out.push(RiskInterval {
            start: s,
            end: mask.len() - 1,
        });
    }
    out
}

/// `|pred ∩ gt| / |pred ∪ gt|` over two step masks of equal length.
///
/// Two empty sets agree vacuously and score 1.
pub fn interval_iou(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of adjacent unequal pairs in a binary sequence.
pub fn switch_count(seq: &[bool]) -> usize {
    seq.windows(2).filter(|w| w[0] != w[1]).count()
}

/// One object's row in a tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub decisions: DecisionSeq,
    pub intervals: Vec<RiskInterval>,
    pub category: RiskCategory,
}

pub type ObjectId = u32;

/// Per-object risk decisions over one horizon window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTube {
    horizon: Horizon,
    policy: AmbiguityPolicy,
    entries: BTreeMap<ObjectId, TubeEntry>,
}

impl RiskTube {
    pub fn new(horizon: Horizon, policy: AmbiguityPolicy) -> Self {
        Self {
            horizon,
            policy,
            entries: BTreeMap::new(),
        }
    }

    /// Inserts (or replaces) an object's decisions; intervals are derived
    /// under the tube's ambiguity policy.
    pub fn insert(&mut self, id: ObjectId, decisions: DecisionSeq, category: RiskCategory) -> Result<(), TubeError> {
        if decisions.len() != self.horizon.len() {
            return Err(TubeError::LengthMismatch {
                expected: self.horizon.len(),
                got: decisions.len(),
            });
        }
        let intervals = intervals_from_decisions(&decisions, self.policy);
        self.entries.insert(
            id,
            TubeEntry {
                decisions,
                intervals,
                category,
            },
        );
        Ok(())
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn policy(&self) -> AmbiguityPolicy {
        self.policy
    }

    pub fn get(&self, id: ObjectId) -> Option<&TubeEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjectId, &TubeEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Risky-step mask of an object under the tube's policy.
    pub fn risky_mask(&self, id: ObjectId) -> Option<Vec<bool>> {
        self.entries.get(&id).map(|e| e.decisions.risky_mask(self.policy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Decision::*;

    fn seq(d: &[Decision]) -> DecisionSeq {
        DecisionSeq::new(d.to_vec(), Origin::Calibrated).unwrap()
    }

    fn pairs(v: &[RiskInterval]) -> Vec<(usize, usize)> {
        v.iter().map(|i| (i.start(), i.end())).collect()
    }

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    fn mask_of(set: &[usize], h: usize) -> Vec<bool> {
        (0..h).map(|t| set.contains(&t)).collect()
    }

    #[test]
    fn horizon_rejects_short() {
        assert_eq!(Horizon::new(1), Err(TubeError::HorizonTooShort(1)));
        assert_eq!(Horizon::new(2).unwrap().len(), 2);
        assert_eq!(Horizon::default().len(), 8);
    }

    #[test]
    fn interval_bounds_checked() {
        let h = Horizon::default();
        assert!(RiskInterval::new(3, 2, h).is_err());
        assert!(RiskInterval::new(0, 8, h).is_err());
        assert_eq!(RiskInterval::new(2, 4, h).unwrap().len(), 3);
    }

    #[test]
    fn ground_truth_rejects_ambiguous() {
        let err = DecisionSeq::new(vec![Risk, Ambiguous], Origin::GroundTruth).unwrap_err();
        assert_eq!(err, TubeError::AmbiguousGroundTruth(1));
    }

    #[test]
    fn intervals_all_no_risk() {
        assert!(intervals_from_decisions(&seq(&[NoRisk; 8]), AmbiguityPolicy::Include).is_empty());
    }

    #[test]
    fn intervals_single_run() {
        let s = seq(&[NoRisk, NoRisk, Risk, Risk, Risk, NoRisk, NoRisk, NoRisk]);
        assert_eq!(pairs(&intervals_from_decisions(&s, AmbiguityPolicy::Include)), vec![(2, 4)]);
    }

    #[test]
    fn intervals_ambiguity_policies() {
        let s = seq(&[Risk, Ambiguous, Risk, NoRisk, NoRisk, NoRisk, Risk, Risk]);
        assert_eq!(
            pairs(&intervals_from_decisions(&s, AmbiguityPolicy::Include)),
            vec![(0, 2), (6, 7)]
        );
        assert_eq!(
            pairs(&intervals_from_decisions(&s, AmbiguityPolicy::Exclude)),
            vec![(0, 0), (2, 2), (6, 7)]
        );
    }

    #[test]
    fn iou_examples() {
        assert!((interval_iou(&mask_of(&[2, 3, 4, 5], 8), &mask_of(&[3, 4, 5, 6], 8)) - 0.6).abs() < 1e-15);
        assert_eq!(interval_iou(&mask_of(&[1, 2], 8), &mask_of(&[1, 2], 8)), 1.0);
        assert_eq!(interval_iou(&[false; 8], &[true; 8]), 0.0);
        assert_eq!(interval_iou(&[false; 8], &[false; 8]), 1.0);
    }

    #[test]
    fn switch_examples() {
        assert_eq!(switch_count(&bits(&[0, 0, 0, 0, 0, 0, 0, 0])), 0);
        assert_eq!(switch_count(&bits(&[0, 1, 1, 1, 0, 0, 1, 1])), 3);
        assert_eq!(switch_count(&bits(&[0, 1, 0, 1, 0, 1, 0, 1])), 7);
    }

    #[test]
    fn tube_insert_checks_length() {
        let mut tube = RiskTube::new(Horizon::default(), AmbiguityPolicy::Include);
        let short = seq(&[Risk; 4]);
        assert!(tube.insert(1, short, RiskCategory::Collision).is_err());
        let s = seq(&[NoRisk, Ambiguous, Risk, NoRisk, NoRisk, NoRisk, NoRisk, NoRisk]);
        tube.insert(1, s, RiskCategory::Collision).unwrap();
        assert_eq!(pairs(&tube.get(1).unwrap().intervals), vec![(1, 2)]);
    }

    #[test]
    fn category_parse_and_order() {
        assert_eq!("Occlusion".parse::<RiskCategory>().unwrap(), RiskCategory::Occlusion);
        assert!("pedestrian".parse::<RiskCategory>().is_err());
        assert!(RiskCategory::Interaction < RiskCategory::Collision);
        assert_eq!(serde_json::to_string(&RiskCategory::Obstacle).unwrap(), "\"obstacle\"");
    }

    fn decision() -> impl Strategy<Value = Decision> {
        prop_oneof![Just(Risk), Just(NoRisk), Just(Ambiguous)]
    }

    proptest! {
        #[test]
        fn include_is_superset_of_exclude(d in prop::collection::vec(decision(), 2..16)) {
            let s = seq(&d);
            let inc = s.risky_mask(AmbiguityPolicy::Include);
            let exc = s.risky_mask(AmbiguityPolicy::Exclude);
            prop_assert!(exc.iter().zip(&inc).all(|(e, i)| !e || *i));
        }

        #[test]
        fn intervals_reproduce_risky_steps(d in prop::collection::vec(decision(), 2..16), include in any::<bool>()) {
            let policy = if include { AmbiguityPolicy::Include } else { AmbiguityPolicy::Exclude };
            let s = seq(&d);
            let ivs = intervals_from_decisions(&s, policy);
            let mut rebuilt = vec![false; d.len()];
            for w in ivs.windows(2) {
                // disjoint, sorted and maximal (a gap of at least one step)
                prop_assert!(w[0].end() + 1 < w[1].start());
            }
            for iv in &ivs {
                rebuilt[iv.start()..=iv.end()].fill(true);
            }
            prop_assert_eq!(rebuilt, s.risky_mask(policy));
        }

        #[test]
        fn iou_symmetric_and_one_iff_equal(a in prop::collection::vec(any::<bool>(), 8), b in prop::collection::vec(any::<bool>(), 8)) {
            prop_assert_eq!(interval_iou(&a, &b), interval_iou(&b, &a));
            prop_assert_eq!(interval_iou(&a, &b) == 1.0, a == b);
        }

        #[test]
        fn switch_count_reverse_invariant(a in prop::collection::vec(any::<bool>(), 2..20)) {
            let mut r = a.clone();
            r.reverse();
            prop_assert_eq!(switch_count(&a), switch_count(&r));
            prop_assert!(switch_count(&a) < a.len());
        }

        #[test]
        fn single_run_switches(h in 2usize..16, s in 0usize..16, len in 1usize..16) {
            prop_assume!(s < h);
            let e = (s + len - 1).min(h - 1);
            let mask: Vec<bool> = (0..h).map(|t| t >= s && t <= e).collect();
            let expected = match (s == 0, e == h - 1) {
                (true, true) => 0,
                (false, false) => 2,
                _ => 1,
            };
            prop_assert_eq!(switch_count(&mask), expected);
        }
    }
}
