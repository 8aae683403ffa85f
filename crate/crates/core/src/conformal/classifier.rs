//! Risk-category assignment for calibration.
//!
//! `Oracle` trusts the category hint carried by the score tube. `Stub` is a
//! nearest-centroid rule over four summary statistics of the raw scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ConformalError, ScoreTube};
use crate::tube::{switch_count, RiskCategory};

/// Summary statistics used by the centroid stub.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFeatures {
    pub mean: f64,
    pub variance: f64,
    /// Switches of the 0.5-thresholded scores.
    pub switches: f64,
    /// First step holding the maximum score.
    pub argmax: f64,
}

impl TrackFeatures {
    pub fn of(tube: &ScoreTube) -> Self {
        let s = tube.scores();
        let n = s.len().max(1) as f64;
        let mean = s.iter().sum::<f64>() / n;
        let variance = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let thresholded: Vec<bool> = s.iter().map(|&x| x >= 0.5).collect();
        let argmax = s
            .iter()
            .enumerate()
            .fold(
                (0usize, f64::NEG_INFINITY),
                |best, (i, &x)| if x > best.1 { (i, x) } else { best },
            )
            .0;
        Self {
            mean,
            variance,
            switches: switch_count(&thresholded) as f64,
            argmax: argmax as f64,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.mean, self.variance, self.switches, self.argmax]
    }

    fn distance_sq(&self, other: &TrackFeatures) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    }
}

/// Per-category mean feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    centroids: BTreeMap<RiskCategory, TrackFeatures>,
}

impl CentroidModel {
    pub fn from_centroids(centroids: BTreeMap<RiskCategory, TrackFeatures>) -> Result<Self, ConformalError> {
        if centroids.is_empty() {
            return Err(ConformalError::NoCentroids);
        }
        Ok(Self { centroids })
    }

    /// Averages the features of labelled training tubes per category.
    pub fn fit<'a>(samples: impl IntoIterator<Item = (&'a ScoreTube, RiskCategory)>) -> Result<Self, ConformalError> {
        let mut sums: BTreeMap<RiskCategory, ([f64; 4], usize)> = BTreeMap::new();
        for (tube, c) in samples {
            let f = TrackFeatures::of(tube).as_array();
            let e = sums.entry(c).or_insert(([0.0; 4], 0));
            for (acc, v) in e.0.iter_mut().zip(f) {
                *acc += v;
            }
            e.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(c, (s, n))| {
                let n = n as f64;
                (
                    c,
                    TrackFeatures {
                        mean: s[0] / n,
                        variance: s[1] / n,
                        switches: s[2] / n,
                        argmax: s[3] / n,
                    },
                )
            })
            .collect();
        Self::from_centroids(centroids)
    }

    pub fn centroid(&self, c: RiskCategory) -> Option<&TrackFeatures> {
        self.centroids.get(&c)
    }

    /// Nearest centroid; ties resolve to the earlier category.
    pub fn nearest(&self, tube: &ScoreTube) -> RiskCategory {
        let f = TrackFeatures::of(tube);
        let mut best: Option<(RiskCategory, f64)> = None;
        for (c, centroid) in &self.centroids {
            let d = f.distance_sq(centroid);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((*c, d));
            }
        }
        best.expect("non-empty by construction").0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CategoryClassifier {
    Oracle,
    Stub(CentroidModel),
}

pub fn classify_category(tube: &ScoreTube, classifier: &CategoryClassifier) -> Result<RiskCategory, ConformalError> {
    match classifier {
        CategoryClassifier::Oracle => tube.category_hint().ok_or(ConformalError::MissingCategoryHint),
        CategoryClassifier::Stub(model) => Ok(model.nearest(tube)),
    }
}
