//! High-norm artifact detection in the final attention layer.
//!
//! For a query/key/value source the per-token norm aggregates every head,
//! with each component scaled by `1/√d_p` inside the square:
//!
//! ```text
//! norm_i = sqrt( Σ_h Σ_j (P[h][i][j] / √d_p)² )
//! ```
//!
//! For the output source it is the plain L2 norm of the final output token.
//! Token `0` (CLS) is never scored; the returned vector covers tokens `1..T`
//! (registers, then patches), so entry `i` belongs to token `i + 1`.
//!
//! Tokens with `norm ≤ θ` form the low group, the rest the high group. The
//! minority rule picks the smaller group as the artifact set; the raw modes
//! pick one side unconditionally for threshold sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::ModelConfig;
use crate::numerics::{l2_norm, Matrix};
use crate::vit::AttentionTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSource {
    Query,
    Key,
    Value,
    /// Final output tokens; needs a completed unengineered pass.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Smaller of the two groups (ties go to the high-norm side).
    Minority,
    /// The low group `norm ≤ θ`.
    RawLow,
    /// The high group `norm > θ`.
    RawHigh,
}

/// Token indices (in `1..T`) selected for attenuation in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSet {
    pub theta: Option<f32>,
    pub mode: Option<SelectionMode>,
    indices: Vec<usize>,
    /// Both groups had equal size under the minority rule.
    pub tie: bool,
}

impl ArtifactSet {
    /// A set given directly rather than detected.
    pub fn fixed(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            theta: None,
            mode: None,
            indices,
            tie: false,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.indices.binary_search(&token).is_ok()
    }
}

/// Per-token norms for tokens `1..T` from the chosen source.
pub fn token_norms(
    att: &AttentionTensors,
    token_outputs: Option<&Matrix>,
    source: NormSource,
) -> Result<Vec<f32>> {
    match att.source(source) {
        Some(heads) => Ok(head_norms(heads)),
        None => {
            let out = token_outputs.ok_or_else(|| {
                Error::InvalidArgument("output norms need the final output tokens".into())
            })?;
            Ok((0..out.rows()).map(|i| l2_norm(out.row(i))).collect())
        }
    }
}

/// Multi-head norm of rows `1..T` of per-head `T × d_p` matrices.
pub fn head_norms(heads: &[Matrix]) -> Vec<f32> {
    let Some(first) = heads.first() else {
        return Vec::new();
    };
    let inv_dp = 1.0 / first.cols() as f64;
    (1..first.rows())
        .map(|i| {
            let sum: f64 = heads
                .iter()
                .map(|h| h.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                .sum();
            (sum * inv_dp).sqrt() as f32
        })
        .collect()
}

/// Split `norms` (entry `i` ↔ token `i + 1`) at `theta` and select a side.
pub fn identify_artifacts(norms: &[f32], theta: f32, mode: SelectionMode) -> Result<ArtifactSet> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("theta must be positive, got {theta}")));
    }
    let (low, high): (Vec<usize>, Vec<usize>) =
        (1..=norms.len()).partition(|&t| norms[t - 1] <= theta);
    let mut tie = false;
    let indices = match mode {
        SelectionMode::RawLow => low,
        SelectionMode::RawHigh => high,
        SelectionMode::Minority => {
            if low.len() < high.len() {
                low
            } else {
                if low.len() == high.len() && !low.is_empty() {
                    tie = true;
                    log::warn!(
                        "theta {theta} splits {} tokens into equal groups; taking the high-norm side",
                        norms.len()
                    );
                }
                high
            }
        }
    };
    Ok(ArtifactSet {
        theta: Some(theta),
        mode: Some(mode),
        indices,
        tie,
    })
}

/// Fixed-range histogram with uniform bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f32,
    pub hi: f32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f32, hi: f32, bins: usize) -> Self {
        assert!(hi > lo && bins > 0, "histogram needs hi > lo and bins > 0");
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f32 {
        (self.hi - self.lo) / self.bins() as f32
    }

    pub fn edges(&self, b: usize) -> (f32, f32) {
        let w = self.width();
        (self.lo + b as f32 * w, self.lo + (b + 1) as f32 * w)
    }

    pub fn center(&self, b: usize) -> f32 {
        let (l, r) = self.edges(b);
        0.5 * (l + r)
    }

    pub fn bin_of(&self, v: f32) -> usize {
        let b = ((v - self.lo) / self.width()).floor();
        (b.max(0.0) as usize).min(self.bins() - 1)
    }

    pub fn add(&mut self, v: f32) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sum counts of a histogram with identical binning.
    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!((self.lo, self.hi, self.bins()), (other.lo, other.hi, other.bins()));
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub const PROFILE_BINS: usize = 512;

/// Dataset-wide norm distribution of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct NormProfile {
    pub source: NormSource,
    /// Per-head dimension of the source (embed_dim for the output source).
    pub d_p: usize,
    /// Norms for tokens `1..T` of every image, in image order.
    pub per_image: Vec<Vec<f32>>,
    pub histogram: Histogram,
    pub min: f32,
    pub max: f32,
    pub mean: f64,
}

impl NormProfile {
    pub fn count(&self) -> usize {
        self.per_image.iter().map(Vec::len).sum()
    }
}

/// Histogram the norms of every image over `[0, 1.05 · max]` in
/// [`PROFILE_BINS`] bins.
pub fn build_profile(source: NormSource, d_p: usize, per_image: Vec<Vec<f32>>) -> Result<NormProfile> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("norm profile needs at least one image".into()));
    }
    let all = per_image.iter().flatten().copied();
    let (mut min, mut max, mut sum, mut n) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64, 0usize);
    for v in all {
        min = min.min(v);
        max = max.max(v);
        sum += v as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("norm profile has no tokens".into()));
    }
    let hi = if max > 0.0 { max * 1.05 } else { 1.0 };
    let histogram = per_image
        .iter()
        .map(|norms| {
            let mut h = Histogram::new(0.0, hi, PROFILE_BINS);
            for &v in norms {
                h.add(v);
            }
            h
        })
        .reduce(|mut a, b| {
            a.merge(&b);
            a
        })
        .expect("non-empty");
    Ok(NormProfile {
        source,
        d_p,
        per_image,
        histogram,
        min,
        max,
        mean: sum / n as f64,
    })
}

/// Advisory threshold from the histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSuggestion {
    pub theta: f32,
    /// Between-class over total variance at the chosen split, in `[0, 1]`.
    pub bimodality: f64,
}

/// Otsu's split: maximize the between-class variance over bin boundaries.
/// When several boundaries tie (an empty gap between modes) the middle of the
/// tied run is used.
pub fn suggest_threshold(hist: &Histogram) -> Result<ThresholdSuggestion> {
    let nonempty = hist.counts.iter().filter(|&&c| c > 0).count();
    if nonempty < 2 {
        return Err(Error::Degenerate(
            "histogram has fewer than two occupied bins".into(),
        ));
    }
    let total: f64 = hist.total() as f64;
    let centers: Vec<f64> = (0..hist.bins()).map(|b| hist.center(b) as f64).collect();
    let mean: f64 = hist
        .counts
        .iter()
        .zip(&centers)
        .map(|(&c, &x)| c as f64 * x)
        .sum::<f64>()
        / total;
    let var: f64 = hist
        .counts
        .iter()
        .zip(&centers)
        .map(|(&c, &x)| c as f64 * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;

    let (mut w0, mut s0) = (0.0f64, 0.0f64);
    let mut best = f64::NEG_INFINITY;
    let mut best_run = (0usize, 0usize);
    for (b, (&count, &center)) in hist.counts.iter().zip(&centers).enumerate().take(hist.bins() - 1) {
        w0 += count as f64;
        s0 += count as f64 * center;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = s0 / w0;
        let mu1 = (mean * total - s0) / w1;
        let between = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
        // relative tolerance so plateaus over empty bins register as ties
        if between > best * (1.0 + 1e-12) {
            best = between;
            best_run = (b, b);
        } else if (between - best).abs() <= best.abs() * 1e-12 && best_run.1 + 1 == b {
            best_run.1 = b;
        }
    }
    let (first, last) = best_run;
    let left = hist.edges(first).1;
    let right = hist.edges(last).1;
    Ok(ThresholdSuggestion {
        theta: 0.5 * (left + right),
        bimodality: if var > 0.0 { best / var } else { 0.0 },
    })
}

/// Default θ for a model: 2.0 for the small variant with registers, 3.0 otherwise.
pub fn default_theta(cfg: &ModelConfig) -> f32 {
    if cfg.embed_dim <= 384 && cfg.num_register_tokens > 0 {
        2.0
    } else {
        3.0
    }
}
