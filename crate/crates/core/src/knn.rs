//! Weighted k-nearest-neighbor classification on cosine similarity.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::FeatureMatrix;
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    /// Each neighbor votes with `exp(sim / temperature)`.
    ExpCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
    pub weighting: Weighting,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 10,
            temperature: 0.07,
            weighting: Weighting::ExpCosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub predictions: Vec<i64>,
    /// Top-1 accuracy in `[0, 1]` when the query set is labeled.
    pub accuracy: Option<f64>,
}

fn unit_rows(x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
    (0..x.n())
        .map(|i| {
            let r: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!("feature row {i} is all zeros")));
            }
            Ok(r.into_iter().map(|v| v / norm).collect())
        })
        .collect()
}

fn classify_one(train: &[Vec<f64>], labels: &[i64], q: &[f64], cfg: &KnnConfig) -> i64 {
    let mut sims: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(j, t)| (t.iter().zip(q).map(|(a, b)| a * b).sum(), j))
        .collect();
    // higher similarity first, then lower index; a total order
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let k = cfg.k.min(sims.len());
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, cmp);
        sims.truncate(k);
    }
    sims.sort_by(cmp);
    let mut votes: BTreeMap<i64, f64> = BTreeMap::new();
    for &(s, j) in &sims {
        let w = match cfg.weighting {
            Weighting::Uniform => 1.0,
            Weighting::ExpCosine => (s / cfg.temperature).exp(),
        };
        *votes.entry(labels[j]).or_insert(0.0) += w;
    }
    let mut best = (i64::MIN, f64::NEG_INFINITY);
    for (&class, &v) in &votes {
        // ascending class order: ties keep the smaller id
        if v.partial_cmp(&best.1) == Some(Ordering::Greater) {
            best = (class, v);
        }
    }
    best.0
}

/// Classify every row of `query` against the labeled `train` set.
pub fn knn_classify(train: &FeatureMatrix, query: &FeatureMatrix, cfg: &KnnConfig, exec: Execution) -> Result<KnnResult> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::InvalidArgument("k-NN training set has no labels".into()))?;
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if cfg.weighting == Weighting::ExpCosine && !(cfg.temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if train.n() == 0 {
        return Err(Error::InvalidArgument("k-NN training set is empty".into()));
    }
    if train.d() != query.d() {
        return Err(Error::Shape(format!(
            "train dim {} vs query dim {}",
            train.d(),
            query.d()
        )));
    }
    let train_u = unit_rows(train)?;
    let query_u = unit_rows(query)?;
    let predictions = par::map_slice(exec, &query_u, |q| classify_one(&train_u, labels, q, cfg));
    let accuracy = query.labels().map(|truth| {
        let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
        hits as f64 / truth.len().max(1) as f64
    });
    Ok(KnnResult { predictions, accuracy })
}
