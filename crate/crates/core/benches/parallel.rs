use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vitclust::clustering::{best_of_sets, Points, ProtocolConfig};
use vitclust::knn::{knn_classify, KnnConfig};
use vitclust::metrics::breakaway_count;
use vitclust::synthetic::ArtifactModel;
use vitclust::vit::extract_features;
use vitclust::{EngineeringPlan, Execution, FeatureMatrix, NormSource, SelectionMode, Vit};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn features(n: usize, d: usize, classes: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let rows = (0..n)
        .map(|i| (0..d).map(|e| noise.sample(&mut rng) + if e % classes == i % classes { 3.0 } else { 0.0 }).collect())
        .collect();
    let labels = (0..n).map(|i| (i % classes) as i64).collect();
    FeatureMatrix::from_rows(rows, Some(labels)).unwrap()
}

fn bench_protocol(c: &mut Criterion) {
    let x = Points::new(&features(500, 32, 10, 1));
    let cfg = ProtocolConfig {
        num_sets: 4,
        runs_per_set: 5,
        ..Default::default()
    };
    let mut g = c.benchmark_group("kmeans_protocol");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| best_of_sets(&x, 10, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_extract(c: &mut Criterion) {
    let m = ArtifactModel::new(4, 4, 1, 3);
    let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
    let images: Vec<_> = (0..64).map(|i| m.image(i % 4, &[3, 7], i as u64)).collect();
    let plan = EngineeringPlan::detect(NormSource::Query, 2.0, SelectionMode::Minority);
    let mut g = c.benchmark_group("extract_features");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| extract_features(&vit, &images, Some(&plan), None, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_knn(c: &mut Criterion) {
    let train = features(2000, 64, 10, 2);
    let query = features(500, 64, 10, 3);
    let cfg = KnnConfig::default();
    let mut g = c.benchmark_group("knn");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| knn_classify(&train, &query, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_silhouette(c: &mut Criterion) {
    let x = features(1000, 32, 10, 4);
    let mut g = c.benchmark_group("breakaway_count");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| breakaway_count(&x, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_protocol, bench_extract, bench_knn, bench_silhouette);
criterion_main!(benches);
