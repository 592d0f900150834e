use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use vitclust::artifacts::{build_profile, identify_artifacts, suggest_threshold, ArtifactSet, Histogram};
use vitclust::clustering::{KMeansConfig, ProtocolConfig};
use vitclust::data::{load_images, load_manifest, preprocess_file};
use vitclust::export::{
    attention_grid, attention_value_histogram, histogram_csv, split_histogram_csv, write_grid, Provenance,
};
use vitclust::knn::{knn_classify, KnnConfig};
use vitclust::model_io::{
    decode_feature_cache, encode_feature_cache, load_weights, FeatureMatrix, ModelConfig,
};
use vitclust::par;
use vitclust::pipeline::{self, evaluate, extract, norm_profile, ExtractOptions, ThetaChoice};
use vitclust::{ArtifactRule, EngineeringPlan, Execution, Image, Matrix, NormSource, SelectionMode, Vit};

use crate::{Command, EngineArgs, ModelArgs, ProtocolArgs, ThetaArgs};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const SIDECAR: &str = "extract.json";

pub fn run(cmd: Command, exec: Execution) -> Result<()> {
    match cmd {
        Command::Extract {
            model,
            manifest,
            eng,
            theta,
            out,
        } => cmd_extract(&model, &manifest, &eng, &theta, &out, exec),
        Command::Cluster {
            features,
            k,
            breakaway,
            protocol,
            out,
        } => cmd_cluster(&features, k, breakaway, &protocol, &out, exec),
        Command::Scan {
            model,
            manifest,
            eng,
            theta_min,
            theta_max,
            theta_step,
            protocol,
            out,
        } => cmd_scan(&model, &manifest, &eng, (theta_min, theta_max, theta_step), &protocol, &out, exec),
        Command::Knn {
            train,
            test,
            k,
            temperature,
            weighting,
            out,
        } => {
            let cfg = KnnConfig {
                k,
                temperature,
                weighting: weighting.into(),
            };
            cmd_knn(&train, &test, &cfg, &out, exec)
        }
        Command::Histograms {
            model,
            manifest,
            eng,
            theta,
            bins,
            out,
        } => cmd_histograms(&model, &manifest, &eng, &theta, bins, &out, exec),
        Command::Attnmap {
            model,
            image,
            manifest,
            index,
            eng,
            theta,
            out,
        } => cmd_attnmap(&model, image.as_deref(), manifest.as_deref(), index, &eng, &theta, &out),
    }
}

fn config_hash(cfg: &ModelConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_model(args: &ModelArgs) -> Result<(Vit, String)> {
    let cfg = ModelConfig::from_json_file(&args.config)?;
    let hash = config_hash(&cfg)?;
    let weights = load_weights(&args.weights)?;
    let vit = Vit::new(cfg, weights).with_context(|| format!("loading {}", args.weights.display()))?;
    Ok((vit, hash))
}

fn load_dataset(manifest: &Path, vit: &Vit, exec: Execution) -> Result<(Vec<Image>, Vec<i64>)> {
    let m = load_manifest(manifest)?;
    log::info!("{} images, {} classes", m.len(), m.num_classes());
    let images = load_images(&m, vit.config().image_size, exec)?;
    Ok((images, m.labels()))
}

/// Write via a temporary sibling and rename, so an interrupted run never
/// leaves a truncated file under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn label(v: impl Serialize) -> Option<String> {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string))
}

fn provenance(seed: Option<u64>, theta: Option<f32>, eng: Option<&EngineArgs>, hash: Option<String>) -> Provenance {
    Provenance {
        tool_version: TOOL_VERSION.into(),
        seed,
        theta,
        source: eng.and_then(|e| label(vitclust::NormSource::from(e.source))),
        strategy: eng.and_then(|e| label(vitclust::Strategy::from(e.strategy))),
        config_hash: hash,
    }
}

fn options(eng: &EngineArgs, theta: ThetaChoice, default_mode: SelectionMode) -> ExtractOptions {
    ExtractOptions {
        source: eng.source.into(),
        theta,
        mode: eng.mode.map_or(default_mode, Into::into),
        strategy: eng.strategy.into(),
        scope: eng.scope.into(),
        lsa_mask: eng.lsa,
    }
}

fn theta_choice(t: &ThetaArgs) -> Result<ThetaChoice> {
    match (t.theta, t.theta_auto) {
        (Some(v), false) if v > 0.0 && v.is_finite() => Ok(ThetaChoice::Fixed(v)),
        (Some(v), false) => bail!("--theta must be positive, got {v}"),
        (None, true) => Ok(ThetaChoice::Auto),
        _ => bail!("give exactly one of --theta and --theta-auto"),
    }
}

#[derive(Serialize)]
struct ExtractSidecar<'a> {
    provenance: Provenance,
    num_classes: usize,
    baseline_cache: &'a str,
    engineered_cache: &'a str,
    #[serde(flatten)]
    summary: &'a pipeline::ExtractSummary,
}

fn cmd_extract(model: &ModelArgs, manifest: &Path, eng: &EngineArgs, theta: &ThetaArgs, out: &Path, exec: Execution) -> Result<()> {
    let (vit, hash) = load_model(model)?;
    let (images, labels) = load_dataset(manifest, &vit, exec)?;
    let num_classes = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    let opts = options(eng, theta_choice(theta)?, SelectionMode::Minority);
    let result = extract(&vit, &images, Some(labels), &opts, exec)?;
    write_atomic(&out.join("baseline.feat"), &encode_feature_cache(&result.baseline)?)?;
    write_atomic(&out.join("engineered.feat"), &encode_feature_cache(&result.engineered)?)?;
    let s = &result.summary;
    write_json(
        &out.join(SIDECAR),
        &ExtractSidecar {
            provenance: provenance(None, Some(s.theta), Some(eng), Some(hash)),
            num_classes,
            baseline_cache: "baseline.feat",
            engineered_cache: "engineered.feat",
            summary: s,
        },
    )?;
    log::info!(
        "theta {:.4}: |A| mean {:.2} (min {}, max {}) over {} images",
        s.theta,
        s.artifacts.mean,
        s.artifacts.min,
        s.artifacts.max,
        s.num_images
    );
    Ok(())
}

fn read_cache(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_feature_cache(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Provenance from an `extract` sidecar next to the cache, when present.
fn sidecar_provenance(cache: &Path) -> Option<Provenance> {
    let path = cache.parent()?.join(SIDECAR);
    let text = std::fs::read_to_string(path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(value.get("provenance")?.clone()).ok()
}

fn protocol_config(p: &ProtocolArgs) -> Result<ProtocolConfig> {
    if p.sets == 0 || p.runs == 0 {
        bail!("--sets and --runs must be at least 1");
    }
    Ok(ProtocolConfig {
        num_sets: p.sets,
        runs_per_set: p.runs,
        base_seed: p.seed,
        kmeans: KMeansConfig::default(),
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "features".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct ClusterOutput<'a> {
    provenance: Provenance,
    features: String,
    #[serde(flatten)]
    report: &'a pipeline::ClusterReport,
}

fn cmd_cluster(features: &[PathBuf], k: Option<usize>, breakaway: bool, p: &ProtocolArgs, out: &Path, exec: Execution) -> Result<()> {
    let protocol = protocol_config(p)?;
    for path in features {
        let x = read_cache(path)?;
        if x.labels().is_none() {
            bail!("{} has no labels; clustering evaluation needs them", path.display());
        }
        let report = evaluate(&x, k, &protocol, breakaway, exec)?;
        let mut prov = sidecar_provenance(path).unwrap_or_else(|| provenance(None, None, None, None));
        prov.tool_version = TOOL_VERSION.into();
        prov.seed = Some(p.seed);
        let stem = file_stem(path);
        write_json(
            &out.join(format!("{stem}.cluster.json")),
            &ClusterOutput {
                provenance: prov,
                features: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                report: &report,
            },
        )?;
        let m = &report.metrics;
        println!(
            "{stem}: ACC {:.2} ± {:.2}  NMI {:.2} ± {:.2}  ARI {:.2} ± {:.2}",
            m.acc.mean, m.acc.stderr, m.nmi.mean, m.nmi.stderr, m.ari.mean, m.ari.stderr
        );
    }
    Ok(())
}

fn theta_grid(min: f32, max: f32, step: f32) -> Result<Vec<f32>> {
    if !(min > 0.0) || !(step > 0.0) || !(max >= min) {
        bail!("need 0 < --theta-min <= --theta-max and --theta-step > 0");
    }
    let n = ((max - min) / step + 1e-4).floor() as usize + 1;
    Ok((0..n).map(|i| min + i as f32 * step).collect())
}

fn cmd_scan(
    model: &ModelArgs,
    manifest: &Path,
    eng: &EngineArgs,
    (min, max, step): (f32, f32, f32),
    p: &ProtocolArgs,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    let thetas = theta_grid(min, max, step)?;
    let protocol = protocol_config(p)?;
    let (vit, hash) = load_model(model)?;
    let (images, labels) = load_dataset(manifest, &vit, exec)?;
    let opts = options(eng, ThetaChoice::Fixed(thetas[0]), SelectionMode::RawLow);
    let points = pipeline::scan(&vit, &images, Some(labels), &thetas, &opts, exec)?;
    let mut csv = provenance(Some(p.seed), None, Some(eng), Some(hash)).header();
    csv.push_str(&format!("# mode={}\n", label(opts.mode).unwrap_or_default()));
    csv.push_str("theta,acc_mean,acc_stderr,nmi_mean,ari_mean,mean_artifacts\n");
    for pt in &points {
        let r = evaluate(&pt.features, None, &protocol, false, exec)?;
        let m = &r.metrics;
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            pt.theta, m.acc.mean, m.acc.stderr, m.nmi.mean, m.ari.mean, pt.artifacts.mean
        ));
        log::info!("theta {}: ACC {:.2} ± {:.2}", pt.theta, m.acc.mean, m.acc.stderr);
    }
    write_atomic(&out.join("scan.csv"), csv.as_bytes())
}

#[derive(Serialize)]
struct KnnOutput {
    provenance: Provenance,
    train: String,
    test: String,
    config: KnnConfig,
    n_train: usize,
    n_test: usize,
    /// Top-1 accuracy ×100.
    accuracy: f64,
}

fn cmd_knn(train: &Path, test: &Path, cfg: &KnnConfig, out: &Path, exec: Execution) -> Result<()> {
    let tr = read_cache(train)?;
    let te = read_cache(test)?;
    let result = knn_classify(&tr, &te, cfg, exec)?;
    let accuracy = result
        .accuracy
        .map(|a| a * 100.0)
        .with_context(|| format!("{} has no labels", test.display()))?;
    let mut prov = sidecar_provenance(test).unwrap_or_else(|| provenance(None, None, None, None));
    prov.tool_version = TOOL_VERSION.into();
    let name = |p: &Path| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    write_json(
        &out.join(format!("{}.knn.json", file_stem(test))),
        &KnnOutput {
            provenance: prov,
            train: name(train),
            test: name(test),
            config: *cfg,
            n_train: tr.n(),
            n_test: te.n(),
            accuracy,
        },
    )?;
    println!("k-NN top-1: {accuracy:.2}");
    Ok(())
}

fn resolve_theta(choice: ThetaChoice, hist: &Histogram) -> Result<f32> {
    Ok(match choice {
        ThetaChoice::Fixed(t) => t,
        ThetaChoice::Auto => {
            let s = suggest_threshold(hist)?;
            log::info!("suggested theta {:.4} (bimodality {:.3})", s.theta, s.bimodality);
            s.theta
        }
    })
}

fn source_name(s: NormSource) -> String {
    label(s).unwrap_or_else(|| "source".into())
}

#[allow(clippy::too_many_arguments)]
fn cmd_histograms(
    model: &ModelArgs,
    manifest: &Path,
    eng: &EngineArgs,
    theta: &ThetaArgs,
    bins: usize,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    if bins == 0 {
        bail!("--bins must be at least 1");
    }
    let (vit, hash) = load_model(model)?;
    let (images, _) = load_dataset(manifest, &vit, exec)?;
    let opts = options(eng, theta_choice(theta)?, SelectionMode::Minority);
    let profile = norm_profile(&vit, &images, opts.source, exec)?;
    let theta = resolve_theta(opts.theta, &profile.histogram)?;
    let prov = provenance(None, Some(theta), Some(eng), Some(hash));

    let mut hist = Histogram::new(0.0, profile.histogram.hi, bins);
    for v in profile.per_image.iter().flatten() {
        hist.add(*v);
    }
    write_atomic(
        &out.join(format!("norms_{}.csv", source_name(opts.source))),
        histogram_csv(&hist, &prov).as_bytes(),
    )?;

    let per_image = par::try_map_range(exec, images.len(), |i| -> vitclust::Result<(Matrix, ArtifactSet)> {
        let state = vit.forward_prefix(&images[i])?;
        let set = identify_artifacts(&profile.per_image[i], theta, opts.mode)?;
        let base = vit.complete(&state, None)?;
        Ok((base.attn_weights_row0, set))
    })?;
    let rows: Vec<&Matrix> = per_image.iter().map(|p| &p.0).collect();
    let sets: Vec<&ArtifactSet> = per_image.iter().map(|p| &p.1).collect();
    let split = attention_value_histogram(&rows, &sets, bins)?;
    write_atomic(&out.join("attention_values.csv"), split_histogram_csv(&split, &prov).as_bytes())?;
    log::info!(
        "{} norms; {} artifact / {} normal attention values",
        hist.total(),
        split.artifact.total(),
        split.normal.total()
    );
    Ok(())
}

#[derive(Serialize)]
struct AttnmapOutput {
    provenance: Provenance,
    grid: usize,
    artifacts: Vec<usize>,
}

fn cmd_attnmap(
    model: &ModelArgs,
    image: Option<&Path>,
    manifest: Option<&Path>,
    index: usize,
    eng: &EngineArgs,
    theta: &ThetaArgs,
    out: &Path,
) -> Result<()> {
    let (vit, hash) = load_model(model)?;
    let size = vit.config().image_size;
    let path = match (image, manifest) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(m)) => {
            let m = load_manifest(m)?;
            m.entries
                .get(index)
                .with_context(|| format!("--index {index} out of range for {} entries", m.len()))?
                .path
                .clone()
        }
        (None, None) => bail!("give --image or --manifest"),
    };
    let img = preprocess_file(&path, size)?;
    let opts = options(eng, theta_choice(theta)?, SelectionMode::Minority);
    let state = vit.forward_prefix(&img)?;
    let theta = match opts.theta {
        ThetaChoice::Fixed(t) => t,
        ThetaChoice::Auto => {
            let norms = vit.norms(&state, opts.source)?;
            let d_p = match opts.source {
                NormSource::Output => vit.config().embed_dim,
                _ => vit.config().head_dim(),
            };
            resolve_theta(opts.theta, &build_profile(opts.source, d_p, vec![norms])?.histogram)?
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
    let base = vit.complete(&state, None)?;
    let engineered = vit.complete(&state, Some(&plan))?;
    let (r, g) = (vit.config().num_register_tokens, vit.config().grid_size());
    let prov = provenance(None, Some(theta), Some(eng), Some(hash));
    write_grid(out, "attn_baseline", &attention_grid(&base.attn_weights_row0, r, g)?, &prov)?;
    write_grid(out, "attn_engineered", &attention_grid(&engineered.attn_weights_row0, r, g)?, &prov)?;
    write_json(
        &out.join("attnmap.json"),
        &AttnmapOutput {
            provenance: prov,
            grid: g,
            artifacts: engineered.artifacts.map(|s| s.indices().to_vec()).unwrap_or_default(),
        },
    )
}
