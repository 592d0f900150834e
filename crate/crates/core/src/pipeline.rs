//! End-to-end steps shared by the command-line tool and the tests:
//! norm profiling, baseline + engineered extraction, threshold scans and
//! clustering evaluation. Outputs are plain data that serialize the same way
//! regardless of the execution mode or worker count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artifacts::{
    build_profile, identify_artifacts, suggest_threshold, ArtifactSet, NormProfile, NormSource, SelectionMode,
    ThresholdSuggestion,
};
use crate::clustering::{best_of_sets, Points, ProtocolConfig, ProtocolStats};
use crate::engineering::{ArtifactRule, EngineeringPlan, Scope, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{ari, breakaway_count, clustering_accuracy, nmi, EvalReport};
use crate::model_io::FeatureMatrix;
use crate::numerics::l2_normalize;
use crate::par::{self, Execution};
use crate::vit::{Image, Vit};

fn tag<E>(i: usize) -> impl Fn(E) -> Error
where
    E: Into<Error>,
{
    move |e| Error::Image {
        id: format!("#{i}"),
        source: Box::new(e.into()),
    }
}

/// Norm profile of `source` over a set of images.
pub fn norm_profile(vit: &Vit, images: &[Image], source: NormSource, exec: Execution) -> Result<NormProfile> {
    let per_image = par::try_map_range(exec, images.len(), |i| {
        let state = vit.forward_prefix(&images[i]).map_err(tag(i))?;
        vit.norms(&state, source).map_err(tag(i))
    })?;
    let cfg = vit.config();
    let d_p = match source {
        NormSource::Output => cfg.embed_dim,
        _ => cfg.head_dim(),
    };
    build_profile(source, d_p, per_image)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaChoice {
    Fixed(f32),
    /// Otsu split of the dataset norm histogram.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub source: NormSource,
    pub theta: ThetaChoice,
    pub mode: SelectionMode,
    pub strategy: Strategy,
    pub scope: Scope,
    pub lsa_mask: bool,
}

impl ExtractOptions {
    pub fn new(theta: ThetaChoice) -> Self {
        Self {
            source: NormSource::Query,
            theta,
            mode: SelectionMode::Minority,
            strategy: Strategy::Minimum,
            scope: Scope::Cls,
            lsa_mask: false,
        }
    }
}

/// Size statistics of the per-image artifact sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// `|A|` → number of images.
    pub size_counts: BTreeMap<usize, usize>,
    /// Images where the minority rule saw two equal groups.
    pub minority_ties: usize,
}

impl ArtifactStats {
    pub fn from_sets(sets: &[ArtifactSet]) -> Self {
        let mut size_counts = BTreeMap::new();
        for s in sets {
            *size_counts.entry(s.len()).or_insert(0) += 1;
        }
        let total: usize = sets.iter().map(ArtifactSet::len).sum();
        Self {
            mean: if sets.is_empty() { 0.0 } else { total as f64 / sets.len() as f64 },
            min: sets.iter().map(ArtifactSet::len).min().unwrap_or(0),
            max: sets.iter().map(ArtifactSet::len).max().unwrap_or(0),
            size_counts,
            minority_ties: sets.iter().filter(|s| s.tie).count(),
        }
    }
}

/// Everything about an extraction that is worth keeping next to the caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub num_images: usize,
    pub feature_dim: usize,
    pub theta: f32,
    pub theta_auto: bool,
    pub suggestion: Option<ThresholdSuggestion>,
    pub options: ExtractOptions,
    pub artifacts: ArtifactStats,
    /// `|A|` of each image, in input order.
    pub per_image_artifacts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExtractOutcome {
    pub baseline: FeatureMatrix,
    pub engineered: FeatureMatrix,
    pub sets: Vec<ArtifactSet>,
    pub summary: ExtractSummary,
}

/// Baseline and engineered normalized CLS features for every image, sharing
/// one pass up to the final attention logits per image.
pub fn extract(
    vit: &Vit,
    images: &[Image],
    labels: Option<Vec<i64>>,
    opts: &ExtractOptions,
    exec: Execution,
) -> Result<ExtractOutcome> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let (theta, suggestion) = match opts.theta {
        ThetaChoice::Fixed(t) => (t, None),
        ThetaChoice::Auto => {
            let profile = norm_profile(vit, images, opts.source, exec)?;
            let s = suggest_threshold(&profile.histogram)?;
            log::info!("suggested theta {:.4} (bimodality {:.3})", s.theta, s.bimodality);
            (s.theta, Some(s))
        }
    };
    let plan = EngineeringPlan {
        artifacts: ArtifactRule::Detect {
            source: opts.source,
            theta,
            mode: opts.mode,
        },
        strategy: opts.strategy,
        scope: opts.scope,
        lsa_mask: opts.lsa_mask,
    };
    let rows = par::try_map_range(exec, images.len(), |i| {
        let state = vit.forward_prefix(&images[i]).map_err(tag(i))?;
        let base = vit.complete(&state, None).map_err(tag(i))?;
        let eng = vit.complete(&state, Some(&plan)).map_err(tag(i))?;
        let set = eng.artifacts.expect("detect rule always yields a set");
        Ok::<_, Error>((
            l2_normalize(&base.cls_feature).map_err(tag(i))?,
            l2_normalize(&eng.cls_feature).map_err(tag(i))?,
            set,
        ))
    })?;
    let mut base_rows = Vec::with_capacity(rows.len());
    let mut eng_rows = Vec::with_capacity(rows.len());
    let mut sets = Vec::with_capacity(rows.len());
    for (b, e, s) in rows {
        base_rows.push(b);
        eng_rows.push(e);
        sets.push(s);
    }
    let baseline = FeatureMatrix::from_rows(base_rows, labels.clone())?.mark_normalized()?;
    let engineered = FeatureMatrix::from_rows(eng_rows, labels)?.mark_normalized()?;
    let summary = ExtractSummary {
        num_images: images.len(),
        feature_dim: baseline.d(),
        theta,
        theta_auto: suggestion.is_some(),
        suggestion,
        options: *opts,
        artifacts: ArtifactStats::from_sets(&sets),
        per_image_artifacts: sets.iter().map(ArtifactSet::len).collect(),
    };
    Ok(ExtractOutcome {
        baseline,
        engineered,
        sets,
        summary,
    })
}

/// Engineered features at one threshold of a scan.
#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub theta: f32,
    pub features: FeatureMatrix,
    pub artifacts: ArtifactStats,
}

/// Engineered features for each threshold. The prefix and norms of each
/// image are computed once and reused across thresholds.
pub fn scan(
    vit: &Vit,
    images: &[Image],
    labels: Option<Vec<i64>>,
    thetas: &[f32],
    opts: &ExtractOptions,
    exec: Execution,
) -> Result<Vec<ScanPoint>> {
    if images.is_empty() || thetas.is_empty() {
        return Err(Error::InvalidArgument("scan needs images and thresholds".into()));
    }
    let per_image = par::try_map_range(exec, images.len(), |i| {
        let state = vit.forward_prefix(&images[i]).map_err(tag(i))?;
        let norms = vit.norms(&state, opts.source).map_err(tag(i))?;
        thetas
            .iter()
            .map(|&theta| {
                let set = identify_artifacts(&norms, theta, opts.mode)?;
                let plan = EngineeringPlan {
                    artifacts: ArtifactRule::Fixed(set.indices().to_vec()),
                    strategy: opts.strategy,
                    scope: opts.scope,
                    lsa_mask: opts.lsa_mask,
                };
                let out = vit.complete(&state, Some(&plan))?;
                Ok((l2_normalize(&out.cls_feature)?, set))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(tag(i))
    })?;
    thetas
        .iter()
        .enumerate()
        .map(|(t, &theta)| {
            let rows = per_image.iter().map(|r| r[t].0.clone()).collect();
            let sets: Vec<ArtifactSet> = per_image.iter().map(|r| r[t].1.clone()).collect();
            Ok(ScanPoint {
                theta,
                features: FeatureMatrix::from_rows(rows, labels.clone())?.mark_normalized()?,
                artifacts: ArtifactStats::from_sets(&sets),
            })
        })
        .collect()
}

/// Clustering evaluation of one feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub protocol: ProtocolConfig,
    pub metrics: EvalReport,
}

/// Run the best-of-runs protocol and score every set's best clustering with
/// ACC, NMI and ARI (×100). `k` defaults to the number of distinct labels.
pub fn evaluate(
    x: &FeatureMatrix,
    k: Option<usize>,
    protocol: &ProtocolConfig,
    with_breakaway: bool,
    exec: Execution,
) -> Result<ClusterReport> {
    let truth = x
        .labels()
        .ok_or_else(|| Error::InvalidArgument("clustering evaluation needs labels".into()))?;
    let k = match k {
        Some(k) => k,
        None => {
            let mut ids = truth.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        }
    };
    let best = best_of_sets(&Points::new(x), k, protocol, exec)?;
    let score = |f: fn(&[usize], &[i64]) -> Result<f64>| -> Result<ProtocolStats> {
        let v = best.iter().map(|r| f(&r.assignments, truth)).collect::<Result<Vec<_>>>()?;
        Ok(ProtocolStats::from_values(v)?.scaled(100.0))
    };
    let metrics = EvalReport {
        acc: score(clustering_accuracy::<usize, i64>)?,
        nmi: score(nmi::<usize, i64>)?,
        ari: score(ari::<usize, i64>)?,
        breakaway_count: if with_breakaway {
            Some(breakaway_count(x, exec)?.count)
        } else {
            None
        },
    };
    Ok(ClusterReport {
        n: x.n(),
        d: x.d(),
        k,
        protocol: *protocol,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::ArtifactModel;

    fn dataset(m: &ArtifactModel, per_class: usize) -> (Vec<Image>, Vec<i64>) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..m.num_classes() {
            for j in 0..per_class {
                let seed = (c * 1000 + j) as u64;
                images.push(m.image(c, &[2 + j % 3, 6], seed));
                labels.push(c as i64);
            }
        }
        (images, labels)
    }

    #[test]
    fn extract_reports_injected_sets_and_matches_across_modes() {
        let m = ArtifactModel::new(3, 2, 0, 4);
        let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
        let (images, labels) = dataset(&m, 4);
        let opts = ExtractOptions::new(ThetaChoice::Auto);
        let a = extract(&vit, &images, Some(labels.clone()), &opts, Execution::Sequential).unwrap();
        let b = extract(&vit, &images, Some(labels), &opts, Execution::Parallel).unwrap();
        assert_eq!(a.baseline.data(), b.baseline.data());
        assert_eq!(a.engineered.data(), b.engineered.data());
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.summary.artifacts.min, 2);
        assert_eq!(a.summary.artifacts.max, 2);
        for (i, s) in a.sets.iter().enumerate() {
            assert_eq!(s.indices(), &[2 + (i % 4) % 3, 6]);
        }
    }

    #[test]
    fn theta_below_every_norm_leaves_features_unchanged() {
        let m = ArtifactModel::new(2, 2, 0, 9);
        let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
        let (images, labels) = dataset(&m, 2);
        let opts = ExtractOptions {
            mode: SelectionMode::RawLow,
            ..ExtractOptions::new(ThetaChoice::Fixed(1e-6))
        };
        let out = extract(&vit, &images, Some(labels), &opts, Execution::Parallel).unwrap();
        assert_eq!(out.baseline.data(), out.engineered.data());
        assert_eq!(out.summary.artifacts.max, 0);
    }

    #[test]
    fn scan_point_matches_fixed_extraction() {
        let m = ArtifactModel::new(2, 2, 0, 2);
        let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
        let (images, labels) = dataset(&m, 3);
        let opts = ExtractOptions {
            mode: SelectionMode::RawHigh,
            ..ExtractOptions::new(ThetaChoice::Fixed(3.0))
        };
        let points = scan(&vit, &images, Some(labels.clone()), &[1e9, 3.0], &opts, Execution::Parallel).unwrap();
        let direct = extract(&vit, &images, Some(labels), &opts, Execution::Sequential).unwrap();
        assert_eq!(points[0].features.data(), direct.baseline.data());
        assert_eq!(points[1].features.data(), direct.engineered.data());
    }

    #[test]
    fn evaluate_defaults_k_to_class_count() {
        let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        let x = FeatureMatrix::from_rows(rows, Some(vec![3, 3, 8, 8])).unwrap();
        let p = ProtocolConfig {
            num_sets: 3,
            runs_per_set: 2,
            ..Default::default()
        };
        let r = evaluate(&x, None, &p, true, Execution::Sequential).unwrap();
        assert_eq!(r.k, 2);
        assert_eq!(r.metrics.acc.mean, 100.0);
        assert_eq!(r.metrics.breakaway_count, Some(0));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["metrics"]["acc"]["stderr"].is_number());
    }
}
