//! External clustering indices and the silhouette-based breakaway count.
//!
//! Labels can be any ordered copyable type; both labelings are remapped to
//! dense ids (in sorted order) before building the contingency table, so all
//! three indices are invariant under relabeling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::ProtocolStats;
use crate::error::{Error, Result};
use crate::model_io::FeatureMatrix;
use crate::par::{self, Execution};

fn dense_ids<L: Ord + Copy>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        map.entry(l).or_insert(0usize);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

/// `table[p][t]` = number of items with predicted id `p` and true id `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub n: u64,
}

impl Contingency {
    pub fn new<A: Ord + Copy, B: Ord + Copy>(pred: &[A], truth: &[B]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "label lengths differ: pred {} vs truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let (p, kp) = dense_ids(pred);
        let (t, kt) = dense_ids(truth);
        let mut table = vec![vec![0u64; kt]; kp];
        for (&a, &b) in p.iter().zip(&t) {
            table[a][b] += 1;
        }
        Ok(Self {
            table,
            n: pred.len() as u64,
        })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let cols = self.table.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.table.iter().map(|r| r[j]).sum()).collect()
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (Kuhn–Munkres
/// with potentials, O(n³)). Returns `assignment[row] = col`.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of items matched under the best one-to-one cluster→class map.
pub fn clustering_accuracy<A: Ord + Copy, B: Ord + Copy>(pred: &[A], truth: &[B]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty labeling".into()));
    }
    let c = Contingency::new(pred, truth)?;
    let size = c.table.len().max(c.table.first().map_or(0, Vec::len));
    let mut cost = vec![vec![0i64; size]; size];
    for (i, row) in c.table.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            cost[i][j] = -(count as i64);
        }
    }
    let assignment = hungarian(&cost);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| -cost[i][j])
        .sum();
    Ok(matched as f64 / c.n as f64)
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    let mut terms: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
/// Both partitions trivial (zero entropy) counts as a perfect match.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(pred: &[A], truth: &[B]) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    if c.n == 0 {
        return Err(Error::InvalidArgument("NMI of an empty labeling".into()));
    }
    let n = c.n as f64;
    let rows = c.row_sums();
    let cols = c.col_sums();
    let ha = entropy(&rows, n);
    let hb = entropy(&cols, n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    // terms sorted before summing so that nmi(a, b) == nmi(b, a) bitwise
    let mut terms = Vec::new();
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                terms.push(nij / n * ((n * nij) / (rows[i] as f64 * cols[j] as f64)).ln());
            }
        }
    }
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum::<f64>().max(0.0);
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> u64 {
    x * x.saturating_sub(1) / 2
}

/// Adjusted Rand index from integer pair counts. Numerator and denominator
/// are formed exactly in integers and divided once.
pub fn ari_from_pair_counts(index: u64, sum_a: u64, sum_b: u64, total_pairs: u64) -> f64 {
    let (i, a, b, c) = (index as i128, sum_a as i128, sum_b as i128, total_pairs as i128);
    let num = 2 * i * c - 2 * a * b;
    let den = (a + b) * c - 2 * a * b;
    if den == 0 {
        // both partitions all-in-one or all-singletons
        return 1.0;
    }
    num as f64 / den as f64
}

pub fn ari<A: Ord + Copy, B: Ord + Copy>(pred: &[A], truth: &[B]) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    if c.n < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two items".into()));
    }
    let index: u64 = c.table.iter().flatten().map(|&x| comb2(x)).sum();
    let sum_a: u64 = c.row_sums().into_iter().map(comb2).sum();
    let sum_b: u64 = c.col_sums().into_iter().map(comb2).sum();
    Ok(ari_from_pair_counts(index, sum_a, sum_b, comb2(c.n)))
}

/// Result of [`breakaway_count`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakaway {
    /// Points with negative silhouette under the true labels.
    pub count: usize,
    /// Points skipped because their class has a single member.
    pub excluded: usize,
}

/// Count points whose Euclidean silhouette coefficient, computed against the
/// true labels, is below zero.
pub fn breakaway_count(x: &FeatureMatrix, exec: Execution) -> Result<Breakaway> {
    let labels = x
        .labels()
        .ok_or_else(|| Error::InvalidArgument("breakaway count needs labels".into()))?;
    let (ids, k) = dense_ids(labels);
    let mut sizes = vec![0usize; k];
    for &c in &ids {
        sizes[c] += 1;
    }
    if sizes.iter().filter(|&&s| s >= 2).count() < 2 {
        return Err(Error::Degenerate(
            "silhouette needs at least two classes with two or more members".into(),
        ));
    }
    let singletons = sizes.iter().filter(|&&s| s == 1).count();
    if singletons > 0 {
        log::warn!("{singletons} single-member classes excluded from the silhouette");
    }
    let negative = par::map_range(exec, x.n(), |i| {
        let own = ids[i];
        if sizes[own] < 2 {
            return false;
        }
        let mut sums = vec![0.0f64; k];
        let xi = x.row(i);
        for j in 0..x.n() {
            if j == i || sizes[ids[j]] < 2 {
                continue;
            }
            let d2: f64 = xi
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| {
                    let d = (*a - *b) as f64;
                    d * d
                })
                .sum();
            sums[ids[j]] += d2.sqrt();
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] >= 2)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        s < 0.0
    });
    Ok(Breakaway {
        count: negative.into_iter().filter(|&b| b).count(),
        excluded: sizes.iter().filter(|&&s| s == 1).sum(),
    })
}

/// Clustering metrics on the ×100 scale, each as mean ± standard error over
/// protocol sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: ProtocolStats,
    pub nmi: ProtocolStats,
    pub ari: ProtocolStats,
    pub breakaway_count: Option<usize>,
}
