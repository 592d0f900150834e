use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vitclust::model_io::{encode_feature_cache, save_weights, FeatureMatrix};
use vitclust::synthetic::ArtifactModel;

const BIN: &str = env!("CARGO_BIN_EXE_vitclust");
// Pixel values are divided by this before PNG encoding and the patch
// embedding is multiplied by it, so the marker survives 8-bit quantization.
const PIXEL_SCALE: f32 = 3.0;
const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

struct Fixture {
    dir: tempfile::TempDir,
    injected: Vec<usize>,
    registers: usize,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn model_args(&self) -> Vec<String> {
        vec![
            "--weights".into(),
            self.path("model/weights.safetensors").display().to_string(),
            "--config".into(),
            self.path("model/config.json").display().to_string(),
        ]
    }

    fn manifest(&self) -> String {
        self.path("data").display().to_string()
    }
}

fn write_png(path: &Path, img: &vitclust::Image) {
    let size = img.size() as u32;
    let mut out = image::RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = img.pixel(y as usize, x as usize, c) / PIXEL_SCALE;
                px[c] = ((v * STD[c] + MEAN[c]) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, image::Rgb(px));
        }
    }
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    out.save(path).unwrap();
}

/// Artifact model container plus a class-per-directory PNG dataset.
fn fixture(registers: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ArtifactModel::new(3, 2, registers, 17);
    let pw = m.weights.remove("patch_embed.proj.weight").unwrap();
    let scaled = vitclust::model_io::Tensor::new(pw.shape.clone(), pw.data.iter().map(|v| v * PIXEL_SCALE).collect()).unwrap();
    m.weights.insert("patch_embed.proj.weight", scaled);
    std::fs::create_dir_all(dir.path().join("model")).unwrap();
    save_weights(&dir.path().join("model/weights.safetensors"), &m.weights).unwrap();
    std::fs::write(dir.path().join("model/config.json"), serde_json::to_vec(&m.cfg).unwrap()).unwrap();

    let first = 1 + registers;
    let mut injected = Vec::new();
    for class in 0..3 {
        for j in 0..6usize {
            let count = 1 + j % 3;
            let tokens: Vec<usize> = (0..count).map(|a| first + (j + 3 * a) % 9).collect();
            let img = m.image(class, &tokens, (class * 10 + j) as u64);
            write_png(&dir.path().join(format!("data/c{class}/img{j:02}.png")), &img);
            injected.push(count);
        }
    }
    Fixture { dir, injected, registers }
}

fn run(args: &[String]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: Vec<String>) -> Output {
    let out = run(&args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn extract(f: &Fixture, out: &Path, extra: &[&str]) {
    let mut a = args(&["extract"]);
    a.extend(f.model_args());
    a.extend(args(&["--manifest", &f.manifest(), "--out", &out.display().to_string()]));
    a.extend(args(extra));
    ok(a);
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json(p: PathBuf) -> Value {
    serde_json::from_slice(&read(p)).unwrap()
}

#[test]
fn extract_and_cluster_are_byte_identical_across_thread_counts() {
    let f = fixture(1);
    let mut outputs = Vec::new();
    for (i, exec) in [vec!["--threads", "1"], vec!["--threads", "4"], vec!["--sequential"]].iter().enumerate() {
        let out = f.path(&format!("run{i}"));
        let mut extra = vec!["--theta-auto"];
        extra.extend(exec);
        extract(&f, &out, &extra);
        let mut a = args(&["cluster", "--sets", "5", "--runs", "4", "--seed", "11", "--breakaway"]);
        a.extend(args(&["--features", &out.join("baseline.feat").display().to_string()]));
        a.extend(args(&["--features", &out.join("engineered.feat").display().to_string()]));
        a.extend(args(&["--out", &out.display().to_string()]));
        a.extend(args(exec));
        ok(a);
        outputs.push(
            ["baseline.feat", "engineered.feat", "extract.json", "baseline.cluster.json", "engineered.cluster.json"]
                .map(|n| read(out.join(n))),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);

    let report = json(f.path("run0/engineered.cluster.json"));
    assert_eq!(report["protocol"]["num_sets"], 5);
    assert_eq!(report["provenance"]["seed"], 11);
    assert_eq!(report["provenance"]["source"], "query");
    assert!(report["provenance"]["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(report["metrics"]["acc"]["per_set"].as_array().unwrap().len(), 5);
}

#[test]
fn sidecar_reports_injected_artifact_counts() {
    let f = fixture(0);
    let out = f.path("out");
    extract(&f, &out, &["--theta-auto"]);
    let side = json(out.join("extract.json"));
    let counts: Vec<usize> = side["per_image_artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(counts, f.injected);
    assert_eq!(side["theta_auto"], true);
    assert_eq!(side["options"]["strategy"], "minimum");
    assert_eq!(side["options"]["scope"], "cls");
    assert_eq!(side["options"]["lsa_mask"], false);
    assert_eq!(side["num_classes"], 3);
}

#[test]
fn theta_below_all_norms_leaves_cache_unchanged() {
    let f = fixture(0);
    let out = f.path("out");
    extract(&f, &out, &["--theta", "0.000001", "--mode", "raw-high", "--strategy", "neg-inf"]);
    // raw-high with θ below everything would attenuate all tokens; raw-low keeps none
    assert_ne!(read(out.join("baseline.feat")), read(out.join("engineered.feat")));
    extract(&f, &out, &["--theta", "0.000001", "--mode", "raw-low"]);
    assert_eq!(read(out.join("baseline.feat")), read(out.join("engineered.feat")));
}

#[test]
fn cluster_rejects_unlabeled_cache() {
    let dir = tempfile::tempdir().unwrap();
    let x = FeatureMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
    let p = dir.path().join("x.feat");
    std::fs::write(&p, encode_feature_cache(&x).unwrap()).unwrap();
    let out = run(&args(&["cluster", "--features", &p.display().to_string(), "--out", &dir.path().display().to_string()]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels"));
}

#[test]
fn theta_flags_are_mutually_exclusive_and_required() {
    let f = fixture(0);
    let out = f.path("out").display().to_string();
    let mut a = args(&["extract"]);
    a.extend(f.model_args());
    a.extend(args(&["--manifest", &f.manifest(), "--out", &out]));
    assert!(!run(&a).status.success());
    let mut both = a.clone();
    both.extend(args(&["--theta", "2", "--theta-auto"]));
    assert!(!run(&both).status.success());
}

fn data_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn histograms_count_every_token_and_split_by_artifact_set() {
    let f = fixture(2);
    let out = f.path("hist");
    let mut a = args(&["histograms", "--theta-auto", "--bins", "64", "--out", &out.display().to_string()]);
    a.extend(f.model_args());
    a.extend(args(&["--manifest", &f.manifest()]));
    ok(a);
    let norms = String::from_utf8(read(out.join("norms_query.csv"))).unwrap();
    assert!(norms.starts_with("# tool_version="));
    let total: u64 = data_rows(&norms).iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    let images = f.injected.len() as u64;
    assert_eq!(total, images * (f.registers as u64 + 9));

    let att = String::from_utf8(read(out.join("attention_values.csv"))).unwrap();
    let rows = data_rows(&att);
    let normal: u64 = rows.iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    let artifact: u64 = rows.iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    let heads = 2;
    let injected: u64 = f.injected.iter().map(|&c| c as u64).sum();
    assert_eq!(artifact, injected * heads);
    assert_eq!(normal + artifact, images * heads * (f.registers as u64 + 9));
}

#[test]
fn attnmap_writes_square_grids() {
    let f = fixture(1);
    let out = f.path("map");
    let mut a = args(&["attnmap", "--theta", "3", "--index", "4", "--out", &out.display().to_string()]);
    a.extend(f.model_args());
    a.extend(args(&["--manifest", &f.manifest()]));
    ok(a);
    let csv = String::from_utf8(read(out.join("attn_engineered.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
    let pgm = String::from_utf8(read(out.join("attn_baseline.pgm"))).unwrap();
    assert!(pgm.starts_with("P2\n"));
    assert!(pgm.contains("\n3 3\n255\n"));
    let meta = json(out.join("attnmap.json"));
    assert_eq!(meta["grid"], 3);
    assert_eq!(meta["artifacts"].as_array().unwrap().len(), f.injected[4]);
}

#[test]
fn scan_and_knn_produce_reports() {
    let f = fixture(0);
    let out = f.path("scan");
    let mut a = args(&[
        "scan", "--theta-min", "1", "--theta-max", "3", "--theta-step", "1", "--sets", "3", "--runs", "3", "--out",
        &out.display().to_string(),
    ]);
    a.extend(f.model_args());
    a.extend(args(&["--manifest", &f.manifest()]));
    ok(a);
    let csv = String::from_utf8(read(out.join("scan.csv"))).unwrap();
    assert!(csv.contains("# mode=raw-low"));
    let rows = data_rows(&csv);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "2", "3"]);

    let feats = f.path("feats");
    extract(&f, &feats, &["--theta", "3"]);
    let cache = feats.join("engineered.feat").display().to_string();
    let o = ok(args(&["knn", "--train", &cache, "--test", &cache, "--k", "1", "--out", &feats.display().to_string()]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("100.00"));
    let report = json(feats.join("engineered.knn.json"));
    assert_eq!(report["accuracy"], 100.0);
    assert_eq!(report["config"]["k"], 1);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.safetensors").display().to_string();
    let out = run(&args(&[
        "extract", "--weights", &missing, "--config", &missing, "--manifest", &missing, "--theta", "2", "--out",
        &dir.path().display().to_string(),
    ]));
    assert!(!out.status.success());
}
