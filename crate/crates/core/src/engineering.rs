//! Inference-time edits of final-layer attention logits.
//!
//! All edits act on the pre-softmax scaled scores `QKᵀ/√d_k` of one head at a
//! time. Column 0 is the CLS token and is never a target. Replacement values
//! (row minimum or row average over the non-CLS columns `1..T`) are computed
//! once from the row as it was before any artifact was replaced, so the
//! result does not depend on the order of the artifact set.

use serde::{Deserialize, Serialize};

use crate::artifacts::{NormSource, SelectionMode};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Value written into artifact columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Minimum of the original non-CLS logits in the row.
    Minimum,
    /// Mean of the original non-CLS logits in the row (artifacts included).
    Average,
    /// `-inf`, i.e. zero attention after softmax.
    NegInf,
}

/// Which query rows are edited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Row 0 only: the CLS query, which is all a CLS feature depends on.
    Cls,
    /// Every query row.
    All,
}

/// How the artifact set of an image is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactRule {
    /// No attenuation (LSA masking may still apply).
    None,
    /// A fixed set of token indices in `1..T`.
    Fixed(Vec<usize>),
    /// Threshold the per-token norms of the final layer for each image.
    Detect {
        source: NormSource,
        theta: f32,
        mode: SelectionMode,
    },
}

/// Everything the forward pass needs to rewrite the final-layer logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineeringPlan {
    pub artifacts: ArtifactRule,
    pub strategy: Strategy,
    pub scope: Scope,
    pub lsa_mask: bool,
}

impl EngineeringPlan {
    /// Minimum strategy on the CLS row with per-image detection.
    pub fn detect(source: NormSource, theta: f32, mode: SelectionMode) -> Self {
        Self {
            artifacts: ArtifactRule::Detect {
                source,
                theta,
                mode,
            },
            strategy: Strategy::Minimum,
            scope: Scope::Cls,
            lsa_mask: false,
        }
    }

    pub fn fixed(indices: Vec<usize>, strategy: Strategy) -> Self {
        Self {
            artifacts: ArtifactRule::Fixed(indices),
            strategy,
            scope: Scope::Cls,
            lsa_mask: false,
        }
    }

    /// True when applying the plan needs full `T×T` logits rather than row 0.
    pub fn needs_full_logits(&self) -> bool {
        self.scope == Scope::All || self.lsa_mask
    }
}

/// Reject indices outside `1..seq_len`.
pub fn validate_artifacts(artifacts: &[usize], seq_len: usize) -> Result<()> {
    for &index in artifacts {
        if index == 0 || index >= seq_len {
            return Err(Error::ArtifactIndex {
                index,
                max: seq_len.saturating_sub(1),
            });
        }
    }
    Ok(())
}

fn replacement(row: &[f32], strategy: Strategy) -> f32 {
    // Masked (-inf) entries are skipped so that an LSA-masked diagonal does
    // not become the minimum of rows other than the CLS row.
    let finite = row[1..].iter().copied().filter(|v| v.is_finite());
    match strategy {
        Strategy::NegInf => f32::NEG_INFINITY,
        Strategy::Minimum => finite.fold(f32::INFINITY, f32::min),
        Strategy::Average => {
            let (mut sum, mut count) = (0.0f32, 0usize);
            for v in finite {
                sum += v;
                count += 1;
            }
            if count == 0 {
                f32::NEG_INFINITY
            } else {
                sum / count as f32
            }
        }
    }
}

/// Edit a single logit row (column 0 = CLS) in place.
pub fn attenuate_row(row: &mut [f32], artifacts: &[usize], strategy: Strategy) -> Result<()> {
    validate_artifacts(artifacts, row.len())?;
    if artifacts.is_empty() {
        return Ok(());
    }
    let mut value = replacement(row, strategy);
    if value == f32::INFINITY {
        // every non-CLS entry was masked
        value = f32::NEG_INFINITY;
    }
    for &k in artifacts {
        row[k] = value;
    }
    Ok(())
}

/// Apply attenuation to every head's logit matrix, each head independently.
pub fn attenuate(
    logits: &mut [Matrix],
    artifacts: &[usize],
    strategy: Strategy,
    scope: Scope,
) -> Result<()> {
    for head in logits.iter_mut() {
        validate_artifacts(artifacts, head.cols())?;
        if artifacts.is_empty() {
            continue;
        }
        let rows = match scope {
            Scope::Cls => 1.min(head.rows()),
            Scope::All => head.rows(),
        };
        for r in 0..rows {
            attenuate_row(head.row_mut(r), artifacts, strategy)?;
        }
    }
    Ok(())
}

/// [`attenuate`] on the CLS row of a model with `num_registers` register
/// tokens at indices `1..=num_registers`; the artifact set may mix registers
/// and patches, and min/average span all non-CLS columns.
pub fn attenuate_with_registers(
    logits: &mut [Matrix],
    artifacts: &[usize],
    strategy: Strategy,
    num_registers: usize,
) -> Result<()> {
    if num_registers == 0 {
        return Err(Error::InvalidArgument(
            "register attenuation requested on a model without register tokens".into(),
        ));
    }
    attenuate(logits, artifacts, strategy, Scope::Cls)
}

/// Set diagonal logits to `-inf` (entry `(0, 0)` only for [`Scope::Cls`]).
pub fn lsa_diagonal_mask(logits: &mut [Matrix], scope: Scope) {
    for head in logits.iter_mut() {
        let n = match scope {
            Scope::Cls => 1,
            Scope::All => head.rows(),
        }
        .min(head.rows())
        .min(head.cols());
        for i in 0..n {
            head.set(i, i, f32::NEG_INFINITY);
        }
    }
}

/// LSA mask first, then attenuation, matching the combined variant.
pub fn apply_plan(logits: &mut [Matrix], artifacts: &[usize], plan: &EngineeringPlan) -> Result<()> {
    if plan.lsa_mask {
        lsa_diagonal_mask(logits, plan.scope);
    }
    attenuate(logits, artifacts, plan.strategy, plan.scope)
}
