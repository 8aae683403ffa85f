//! Spatiotemporal feature-alignment loss.
//!
//! For every time `t` and ordered pair `(i, k)` of distinct objects sharing a
//! risk category, both observed at `t` and `t + 1`:
//!
//! ```text
//! spat  = cos(F_i(t), F_k(t))
//! delta = cos(F_i(t), F_i(t+1)) - cos(F_k(t), F_k(t+1))
//! loss  = mean over triplets of (spat - delta)^2
//! ```
//!
//! Both orderings of a pair are kept; `delta` flips sign between them, so
//! they contribute different terms. Identical same-category tracks therefore
//! score 1.0 (`spat = 1`, `delta = 0`), which is the literal value of the
//! formula rather than a perfect-agreement zero.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tube::{ObjectId, RiskCategory};

#[derive(Debug, Error)]
pub enum StfaError {
    #[error("zero feature vector (object {object}, t = {t})")]
    ZeroVector { object: ObjectId, t: usize },
    #[error("vector length mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("no valid (t, i, k) triplet: no same-category pair observed at consecutive times")]
    NoValidTriplets,
    #[error("object {0} appears in more than one track")]
    DuplicateObject(ObjectId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Latent feature vectors of one object, keyed by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub object: ObjectId,
    pub category: RiskCategory,
    pub features: BTreeMap<usize, Vec<f64>>,
}

impl FeatureTrack {
    pub fn new(object: ObjectId, category: RiskCategory, features: BTreeMap<usize, Vec<f64>>) -> Self {
        Self {
            object,
            category,
            features,
        }
    }

    /// Track observed at consecutive times starting from 0.
    pub fn dense(object: ObjectId, category: RiskCategory, features: Vec<Vec<f64>>) -> Self {
        Self::new(object, category, features.into_iter().enumerate().collect())
    }

    fn at(&self, t: usize) -> Option<&[f64]> {
        self.features.get(&t).map(Vec::as_slice)
    }
}

/// Norm handling for the cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignmentOptions {
    /// When set, added to every norm and zero vectors are accepted.
    pub norm_epsilon: Option<f64>,
}

impl AlignmentOptions {
    pub fn with_epsilon() -> Self {
        Self {
            norm_epsilon: Some(1e-8),
        }
    }
}

fn cosine_with(a: &[f64], b: &[f64], opts: AlignmentOptions) -> Result<f64, CosineError> {
    if a.len() != b.len() {
        return Err(CosineError::Dim(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match opts.norm_epsilon {
        Some(eps) => Ok(dot / ((na + eps) * (nb + eps))),
        None if na == 0.0 => Err(CosineError::ZeroA),
        None if nb == 0.0 => Err(CosineError::ZeroB),
        None => Ok(dot / (na * nb)),
    }
}

enum CosineError {
    Dim(usize, usize),
    ZeroA,
    ZeroB,
}

fn cosine_at(a: (&[f64], ObjectId, usize), b: (&[f64], ObjectId, usize), opts: AlignmentOptions) -> Result<f64, StfaError> {
    cosine_with(a.0, b.0, opts).map_err(|e| match e {
        CosineError::Dim(x, y) => StfaError::DimensionMismatch { a: x, b: y },
        CosineError::ZeroA => StfaError::ZeroVector { object: a.1, t: a.2 },
        CosineError::ZeroB => StfaError::ZeroVector { object: b.1, t: b.2 },
    })
}

/// Cosine similarity of two same-time feature vectors.
pub fn spatial_similarity(f_i: &[f64], f_k: &[f64]) -> Result<f64, StfaError> {
    cosine_at((f_i, 0, 0), (f_k, 0, 0), AlignmentOptions::default())
}

/// Difference of the two objects' self-similarities between `t` and `t + 1`.
pub fn temporal_delta(f_i_t: &[f64], f_i_t1: &[f64], f_k_t: &[f64], f_k_t1: &[f64]) -> Result<f64, StfaError> {
    let o = AlignmentOptions::default();
    Ok(cosine_at((f_i_t, 0, 0), (f_i_t1, 0, 1), o)? - cosine_at((f_k_t, 0, 0), (f_k_t1, 0, 1), o)?)
}

/// A valid `(t, i, k)`; `i` and `k` are object ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub t: usize,
    pub i: ObjectId,
    pub k: ObjectId,
}

fn sorted_tracks(tracks: &[FeatureTrack]) -> Result<Vec<&FeatureTrack>, StfaError> {
    let mut sorted: Vec<&FeatureTrack> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.object);
    for w in sorted.windows(2) {
        if w[0].object == w[1].object {
            return Err(StfaError::DuplicateObject(w[0].object));
        }
    }
    Ok(sorted)
}

/// All valid ordered triplets in `(t, i, k)` order.
pub fn triplets(tracks: &[FeatureTrack]) -> Result<Vec<Triplet>, StfaError> {
    let sorted = sorted_tracks(tracks)?;
    let times: BTreeSet<usize> = sorted.iter().flat_map(|tr| tr.features.keys().copied()).collect();
    let mut out = Vec::new();
    for &t in &times {
        let live: Vec<&FeatureTrack> = sorted
            .iter()
            .copied()
            .filter(|tr| tr.at(t).is_some() && tr.at(t + 1).is_some())
            .collect();
        for a in &live {
            for b in &live {
                if a.object != b.object && a.category == b.category {
                    out.push(Triplet {
                        t,
                        i: a.object,
                        k: b.object,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Pairwise (tree) summation; the reduction order depends only on the length.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn alignment_loss(tracks: &[FeatureTrack]) -> Result<f64, StfaError> {
    alignment_loss_with(tracks, AlignmentOptions::default())
}

/// Mean squared mismatch between spatial similarity and temporal delta.
///
/// Terms are reduced in `(t, i, k)` order with a fixed tree, so the result is
/// bit-identical under any reordering of `tracks`.
pub fn alignment_loss_with(tracks: &[FeatureTrack], opts: AlignmentOptions) -> Result<f64, StfaError> {
    let by_id: BTreeMap<ObjectId, &FeatureTrack> = sorted_tracks(tracks)?.into_iter().map(|t| (t.object, t)).collect();
    let trips = triplets(tracks)?;
    if trips.is_empty() {
        return Err(StfaError::NoValidTriplets);
    }
    let terms = trips
        .iter()
        .map(|tr| {
            let (a, b) = (by_id[&tr.i], by_id[&tr.k]);
            let (t, t1) = (tr.t, tr.t + 1);
            let ai = (a.at(t).expect("triplet"), a.object, t);
            let ai1 = (a.at(t1).expect("triplet"), a.object, t1);
            let bk = (b.at(t).expect("triplet"), b.object, t);
            let bk1 = (b.at(t1).expect("triplet"), b.object, t1);
            let spat = cosine_at(ai, bk, opts)?;
            let delta = cosine_at(ai, ai1, opts)? - cosine_at(bk, bk1, opts)?;
            Ok((spat - delta).powi(2))
        })
        .collect::<Result<Vec<f64>, StfaError>>()?;
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

#[derive(Deserialize)]
struct FeatureLine {
    object: ObjectId,
    category: RiskCategory,
    t: usize,
    vector: Vec<f64>,
}

/// Reads `{object, category, t, vector}` JSON lines into tracks ordered by
/// object id. Blank lines are skipped.
pub fn read_feature_tracks<R: BufRead>(reader: R) -> Result<Vec<FeatureTrack>, StfaError> {
    let mut tracks: BTreeMap<ObjectId, FeatureTrack> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureLine = serde_json::from_str(&line).map_err(|e| StfaError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let d = *dim.get_or_insert(rec.vector.len());
        if d != rec.vector.len() {
            return Err(StfaError::Parse {
                line: lineno,
                msg: format!("vector length {} differs from {d}", rec.vector.len()),
            });
        }
        let track = tracks
            .entry(rec.object)
            .or_insert_with(|| FeatureTrack::new(rec.object, rec.category, BTreeMap::new()));
        if track.category != rec.category {
            return Err(StfaError::Parse {
                line: lineno,
                msg: format!("object {} changes category", rec.object),
            });
        }
        if track.features.insert(rec.t, rec.vector).is_some() {
            return Err(StfaError::Parse {
                line: lineno,
                msg: format!("duplicate entry for object {} at t = {}", rec.object, rec.t),
            });
        }
    }
    Ok(tracks.into_values().collect())
}
