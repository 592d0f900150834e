mod common;

use proptest::prelude::*;
use vitclust::model_io::{FfnKind, ModelConfig};
use vitclust::synthetic::{add_layer_scale, random_image, random_model, tiny_config, ArtifactModel};
use vitclust::vit::extract_features;
use vitclust::{EngineeringPlan, Execution, NormSource, Scope, SelectionMode, Strategy, Vit};

fn max_err(cfg: &ModelConfig, seed: u64) -> f64 {
    let mut store = random_model(cfg, seed);
    add_layer_scale(&mut store, cfg, seed + 1);
    let img = random_image(cfg.image_size, seed + 2);
    let vit = Vit::new(cfg.clone(), store.clone()).unwrap();
    let got = vit.forward(&img, None).unwrap().cls_feature;
    let want = common::reference_cls(cfg, &store, &img);
    got.iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}

#[test]
fn swiglu_blocks_match_reference() {
    let mut cfg = tiny_config(12, 4, 12, 3, 2);
    cfg.ffn_layer = FfnKind::SwiGlu;
    cfg.mlp_hidden_dim = Some(20);
    cfg.num_register_tokens = 2;
    assert!(max_err(&cfg, 40) < 1e-4);
}

#[test]
fn token_sequence_matches_reference() {
    let mut cfg = tiny_config(8, 4, 8, 2, 1);
    cfg.num_register_tokens = 3;
    let store = random_model(&cfg, 3);
    let img = random_image(8, 4);
    let vit = Vit::new(cfg.clone(), store.clone()).unwrap();
    let x = vit.embed(&img).unwrap();
    let want = common::reference_tokens(&cfg, &store, &img);
    assert_eq!(x.rows(), want.len());
    for (i, row) in want.iter().enumerate() {
        for (a, b) in x.row(i).iter().zip(row) {
            assert!((*a as f64 - b).abs() < 1e-5, "token {i}");
        }
    }
}

#[test]
fn all_scope_with_lsa_runs_on_every_strategy() {
    let m = ArtifactModel::new(2, 2, 1, 8);
    let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
    let img = m.image(0, &[3, 5], 1);
    for strategy in [Strategy::Minimum, Strategy::Average, Strategy::NegInf] {
        let plan = EngineeringPlan {
            scope: Scope::All,
            lsa_mask: true,
            strategy,
            ..EngineeringPlan::detect(NormSource::Query, 2.0, SelectionMode::Minority)
        };
        let out = vit.forward(&img, Some(&plan)).unwrap();
        assert!(out.cls_feature.iter().all(|v| v.is_finite()));
        assert_eq!(out.artifacts.unwrap().indices(), &[3, 5]);
        // LSA masks the CLS self-attention
        for h in 0..2 {
            assert_eq!(out.attn_weights_row0.get(h, 0), 0.0);
        }
    }
}

#[test]
fn attenuation_restores_class_signal_in_cls_feature() {
    // artifacts carry label-independent noise; attenuating them should make
    // same-class features closer than with the baseline
    let m = ArtifactModel::new(2, 2, 0, 12);
    let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
    let images: Vec<_> = (0..8).map(|i| m.image(i % 2, &[2, 4, 8], 50 + i as u64)).collect();
    let plan = EngineeringPlan::detect(NormSource::Query, 2.0, SelectionMode::Minority);
    let margin = |plan: Option<&EngineeringPlan>| {
        let f = extract_features(&vit, &images, plan, None, Execution::Sequential).unwrap();
        let dot = |a: usize, b: usize| f.row(a).iter().zip(f.row(b)).map(|(x, y)| x * y).sum::<f32>();
        let (mut same, mut diff) = (0.0, 0.0);
        for a in 0..8 {
            for b in a + 1..8 {
                if a % 2 == b % 2 {
                    same += dot(a, b);
                } else {
                    diff += dot(a, b);
                }
            }
        }
        same / 12.0 - diff / 16.0
    };
    assert!(margin(Some(&plan)) > margin(None));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn sequential_and_parallel_extraction_agree(seed in 0u64..1000, theta in 0.5f32..6.0) {
        let m = ArtifactModel::new(3, 2, 1, seed);
        let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
        let images: Vec<_> = (0..6).map(|i| m.image(i % 3, &[2 + i, 9], seed + i as u64)).collect();
        let plan = EngineeringPlan::detect(NormSource::Key, theta, SelectionMode::RawHigh);
        let a = extract_features(&vit, &images, Some(&plan), None, Execution::Sequential).unwrap();
        let b = extract_features(&vit, &images, Some(&plan), None, Execution::Parallel).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

#[test]
fn scan_between_modes_does_not_lose_accuracy() {
    use vitclust::clustering::ProtocolConfig;
    use vitclust::pipeline::{evaluate, scan, ExtractOptions, ThetaChoice};

    let m = ArtifactModel::new(3, 2, 0, 21);
    let vit = Vit::new(m.cfg.clone(), m.weights.clone()).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30usize {
        images.push(m.image(i % 3, &[1 + i % 9, 1 + (i + 4) % 9], i as u64));
        labels.push((i % 3) as i64);
    }
    let opts = ExtractOptions::new(ThetaChoice::Fixed(1.0));
    // 1e-6 selects nothing under the minority rule; 2.0 sits between the modes
    let points = scan(&vit, &images, Some(labels), &[1e-6, 2.0], &opts, Execution::Parallel).unwrap();
    assert_eq!(points[0].artifacts.max, 0);
    assert_eq!(points[1].artifacts.min, 2);
    let protocol = ProtocolConfig {
        num_sets: 5,
        runs_per_set: 5,
        ..Default::default()
    };
    let acc = |i: usize| evaluate(&points[i].features, None, &protocol, false, Execution::Parallel).unwrap().metrics.acc.mean;
    let (base, eng) = (acc(0), acc(1));
    assert!(eng >= base, "engineered {eng} < baseline {base}");
}
