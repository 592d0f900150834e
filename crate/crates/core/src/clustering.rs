//! Seeded K-Means (k-means++ init, Lloyd iterations) and the repeated
//! best-of-runs evaluation protocol.
//!
//! All arithmetic is f64 over an f64 copy of the features. Distances and
//! centroid sums are accumulated in index order, so a given seed always
//! produces the same clustering regardless of how runs are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::FeatureMatrix;
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// Row-major `k × d`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
}

impl ClusterResult {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }
}

/// Feature rows widened to f64 once, shared by every run.
#[derive(Debug, Clone)]
pub struct Points {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(x: &FeatureMatrix) -> Self {
        Self {
            n: x.n(),
            d: x.d(),
            data: x.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(p, cen);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn kmeans_plus_plus(x: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = x.d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..x.n);
    centroids.extend_from_slice(x.row(first));
    let mut min_d: Vec<f64> = (0..x.n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in min_d.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the final sum
            chosen.unwrap_or_else(|| min_d.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..x.n)
        };
        let row = x.row(pick).to_vec();
        for (i, m) in min_d.iter_mut().enumerate() {
            *m = m.min(sq_dist(x.row(i), &row));
        }
        centroids.extend_from_slice(&row);
    }
    centroids
}

/// One K-Means run on pre-widened points.
pub fn kmeans_points(x: &Points, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterResult> {
    if k == 0 || k > x.n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={} (number of points)",
            x.n
        )));
    }
    let d = x.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(x, k, &mut rng);
    let mut assignments = vec![0usize; x.n];
    let mut dists = vec![0.0f64; x.n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        for i in 0..x.n {
            let (c, dist) = nearest(x.row(i), &centroids, d);
            assignments[i] = c;
            dists[i] = dist;
        }
        history.push(dists.iter().sum());
        if iterations == cfg.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; x.n];
        let mut shift = 0.0f64;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * d..(c + 1) * d].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // re-seed an empty cluster at the worst-served point
                let far = (0..x.n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                log::debug!("seed {seed}: cluster {c} empty, re-seeded at point {far}");
                x.row(far).to_vec()
            };
            shift = shift.max(sq_dist(&new, &centroids[c * d..(c + 1) * d]).sqrt());
            centroids[c * d..(c + 1) * d].copy_from_slice(&new);
        }
        if shift < cfg.tol {
            // final assignment against the converged centroids
            for i in 0..x.n {
                let (c, dist) = nearest(x.row(i), &centroids, d);
                assignments[i] = c;
                dists[i] = dist;
            }
            history.push(dists.iter().sum());
            break;
        }
    }

    Ok(ClusterResult {
        assignments,
        centroids,
        k,
        d,
        inertia: *history.last().expect("at least one assignment step"),
        iterations,
        seed,
        inertia_history: history,
    })
}

/// One K-Means run on a feature matrix.
pub fn kmeans(x: &FeatureMatrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterResult> {
    kmeans_points(&Points::new(x), k, seed, cfg)
}

/// SplitMix64 finalizer; spreads consecutive indices into unrelated seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub num_sets: usize,
    pub runs_per_set: usize,
    pub base_seed: u64,
    pub kmeans: KMeansConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            num_sets: 20,
            runs_per_set: 25,
            base_seed: 0,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn run_seed(&self, set: usize, run: usize) -> u64 {
        derive_seed(self.base_seed, (set * self.runs_per_set + run) as u64)
    }
}

/// Per-set values summarized as mean and standard error of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStats {
    pub mean: f64,
    /// Sample standard deviation over sets divided by √sets.
    pub stderr: f64,
    pub per_set: Vec<f64>,
}

impl ProtocolStats {
    pub fn from_values(per_set: Vec<f64>) -> Result<Self> {
        if per_set.is_empty() {
            return Err(Error::InvalidArgument("no protocol sets".into()));
        }
        let n = per_set.len() as f64;
        let mean = per_set.iter().sum::<f64>() / n;
        let stderr = if per_set.len() > 1 {
            let var = per_set.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, stderr, per_set })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mean: self.mean * factor,
            stderr: self.stderr * factor,
            per_set: self.per_set.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Best run (lowest inertia, earliest run on ties) of each set.
pub fn best_of_sets(x: &Points, k: usize, cfg: &ProtocolConfig, exec: Execution) -> Result<Vec<ClusterResult>> {
    if cfg.num_sets == 0 || cfg.runs_per_set == 0 {
        return Err(Error::InvalidArgument("protocol needs at least one set and one run".into()));
    }
    let total = cfg.num_sets * cfg.runs_per_set;
    let runs = par::try_map_range(exec, total, |j| {
        let (set, run) = (j / cfg.runs_per_set, j % cfg.runs_per_set);
        kmeans_points(x, k, cfg.run_seed(set, run), &cfg.kmeans)
    })?;
    let mut best = Vec::with_capacity(cfg.num_sets);
    for set in runs.chunks(cfg.runs_per_set) {
        let mut pick = &set[0];
        for r in &set[1..] {
            if r.inertia < pick.inertia {
                pick = r;
            }
        }
        best.push(pick.clone());
    }
    Ok(best)
}

/// Run the protocol and score each set's best clustering with `metric`.
pub fn run_protocol<F>(
    x: &FeatureMatrix,
    k: usize,
    cfg: &ProtocolConfig,
    exec: Execution,
    metric: F,
) -> Result<ProtocolStats>
where
    F: Fn(&ClusterResult) -> Result<f64>,
{
    let best = best_of_sets(&Points::new(x), k, cfg, exec)?;
    let values = best.iter().map(metric).collect::<Result<Vec<_>>>()?;
    ProtocolStats::from_values(values)
}
