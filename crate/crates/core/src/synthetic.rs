//! Seeded synthetic models and images for tests, benchmarks and demos.
//!
//! [`random_model`] fills every tensor of a config with scaled Gaussian
//! values. [`ArtifactModel`] is a hand-built single-purpose ViT in which
//! chosen patches carry a marker that makes their final-layer queries and
//! keys much larger than everyone else's, so the CLS token attends almost
//! exclusively to them. Those marked patches carry label-independent noise,
//! while ordinary patches carry a class prototype.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::model_io::{FfnKind, ModelConfig, Tensor, WeightStore};
use crate::vit::Image;

pub fn tiny_config(image_size: usize, patch_size: usize, embed_dim: usize, num_heads: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        patch_size,
        image_size,
        embed_dim,
        depth,
        num_heads,
        mlp_ratio: 2.0,
        num_register_tokens: 0,
        layer_norm_eps: 1e-6,
        ffn_layer: FfnKind::Mlp,
        mlp_hidden_dim: None,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Random weights for every required tensor of `cfg`.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (key, shape) in cfg.required_keys() {
        let n: usize = shape.iter().product();
        let data = if key.ends_with("norm1.weight") || key.ends_with("norm2.weight") || key == "norm.weight" {
            (0..n).map(|_| 1.0 + rng.random_range(-0.2f32..0.2)).collect()
        } else if key.ends_with(".bias") || key.starts_with("norm") {
            gaussian(&mut rng, n, 0.1)
        } else if key.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            gaussian(&mut rng, n, 1.0 / (fan_in as f32).sqrt())
        } else {
            gaussian(&mut rng, n, 0.5)
        };
        store.insert(key, Tensor::new(shape, data).expect("shape from config"));
    }
    store
}

/// Add per-block layer-scale vectors to a store.
pub fn add_layer_scale(store: &mut WeightStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (key, shape) in cfg.optional_keys() {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.1f32..1.0)).collect();
        store.insert(key, Tensor::new(shape, data).expect("shape from config"));
    }
}

/// Standard-normal image of side `size`.
pub fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(size, gaussian(&mut rng, size * size * 3, 1.0)).expect("size matches")
}

// Embedding layout of the artifact model.
const DIM: usize = 16;
const MARK: [usize; 2] = [0, 1];
const LABEL: std::ops::Range<usize> = 2..8;
const NOISE: std::ops::Range<usize> = 8..14;
const CLS_MARK: [usize; 2] = [14, 15];

/// Model whose final-layer CLS attention is captured by marked patches.
#[derive(Debug, Clone)]
pub struct ArtifactModel {
    pub cfg: ModelConfig,
    pub weights: WeightStore,
    prototypes: Vec<Vec<f32>>,
}

impl ArtifactModel {
    /// `42×42` images, `14`-pixel patches (9 patches), 16-dim embedding,
    /// 2 heads. Blocks before the last are identity.
    pub fn new(num_classes: usize, depth: usize, num_registers: usize, seed: u64) -> Self {
        let mut cfg = tiny_config(42, 14, DIM, 2, depth);
        cfg.num_register_tokens = num_registers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DIM;
        let p = cfg.patch_size;
        let mut w = WeightStore::new();
        let mut put = |key: String, shape: Vec<usize>, data: Vec<f32>| {
            w.insert(key, Tensor::new(shape, data).expect("consistent shape"));
        };

        // dim e reads pixel (e / p, e % p) of channel 0 inside each patch
        let mut patch_w = vec![0.0f32; d * 3 * p * p];
        for e in 0..d {
            patch_w[e * 3 * p * p + (e / p) * p + e % p] = 1.0;
        }
        put("patch_embed.proj.weight".into(), vec![d, 3, p, p], patch_w);
        put("patch_embed.proj.bias".into(), vec![d], vec![0.0; d]);
        put("pos_embed".into(), vec![1, 1 + cfg.num_patches(), d], vec![0.0; (1 + cfg.num_patches()) * d]);
        let mut cls = vec![0.0f32; d];
        cls[CLS_MARK[0]] = 2.0;
        cls[CLS_MARK[1]] = -2.0;
        put("cls_token".into(), vec![1, 1, d], cls);
        if num_registers > 0 {
            // marker dims stay zero so registers score like ordinary tokens
            let mut regs = gaussian(&mut rng, num_registers * d, 0.3);
            for r in 0..num_registers {
                for e in MARK.into_iter().chain(CLS_MARK) {
                    regs[r * d + e] = 0.0;
                }
            }
            put("register_tokens".into(), vec![1, num_registers, d], regs);
        }

        let hidden = cfg.hidden_dim();
        for i in 0..depth {
            let last = i + 1 == depth;
            let k = |s: &str| format!("blocks.{i}.{s}");
            let mut qkv = vec![0.0f32; 3 * d * d];
            if last {
                for r in 0..d {
                    // query: marker difference, CLS marker, weak label read-out
                    let q = &mut qkv[r * d..(r + 1) * d];
                    q[MARK[0]] = 1.0;
                    q[MARK[1]] = -1.0;
                    q[CLS_MARK[0]] = 0.35;
                    q[CLS_MARK[1]] = -0.35;
                    for c in LABEL {
                        q[c] = 0.05;
                    }
                    // key: marker difference only
                    let kr = &mut qkv[(d + r) * d..(d + r + 1) * d];
                    kr[MARK[0]] = 0.3;
                    kr[MARK[1]] = -0.3;
                    // value: identity
                    qkv[(2 * d + r) * d + r] = 1.0;
                }
            }
            let eye: Vec<f32> = (0..d * d).map(|j| if j % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
            put(k("norm1.weight"), vec![d], vec![1.0; d]);
            put(k("norm1.bias"), vec![d], vec![0.0; d]);
            put(k("attn.qkv.weight"), vec![3 * d, d], qkv);
            put(k("attn.qkv.bias"), vec![3 * d], vec![0.0; 3 * d]);
            put(k("attn.proj.weight"), vec![d, d], if last { eye } else { vec![0.0; d * d] });
            put(k("attn.proj.bias"), vec![d], vec![0.0; d]);
            put(k("norm2.weight"), vec![d], vec![1.0; d]);
            put(k("norm2.bias"), vec![d], vec![0.0; d]);
            put(k("mlp.fc1.weight"), vec![hidden, d], vec![0.0; hidden * d]);
            put(k("mlp.fc1.bias"), vec![hidden], vec![0.0; hidden]);
            put(k("mlp.fc2.weight"), vec![d, hidden], vec![0.0; d * hidden]);
            put(k("mlp.fc2.bias"), vec![d], vec![0.0; d]);
        }
        put("norm.weight".into(), vec![d], vec![1.0; d]);
        put("norm.bias".into(), vec![d], vec![0.0; d]);

        let prototypes = (0..num_classes)
            .map(|_| {
                LABEL
                    .map(|_| if rng.random_bool(0.5) { 3.0 } else { -3.0 })
                    .collect()
            })
            .collect();
        Self {
            cfg,
            weights: w,
            prototypes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Image of class `class` whose patches at the given token indices
    /// (`1 + R + patch`) are marked as artifacts.
    pub fn image(&self, class: usize, artifact_tokens: &[usize], seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.cfg;
        let (p, g, size) = (cfg.patch_size, cfg.grid_size(), cfg.image_size);
        let first_patch = 1 + cfg.num_register_tokens;
        let small = Normal::new(0.0f32, 0.3).expect("valid std");
        let big = Normal::new(0.0f32, 2.0).expect("valid std");
        let mut data = vec![0.0f32; size * size * 3];
        for idx in 0..g * g {
            let mut emb = [0.0f32; DIM];
            if artifact_tokens.contains(&(first_patch + idx)) {
                emb[MARK[0]] = 4.0;
                emb[MARK[1]] = -4.0;
                for e in NOISE {
                    emb[e] = big.sample(&mut rng);
                }
            } else {
                for (e, v) in LABEL.zip(&self.prototypes[class]) {
                    emb[e] = v + small.sample(&mut rng);
                }
                for e in NOISE {
                    emb[e] = small.sample(&mut rng);
                }
            }
            let (gy, gx) = (idx / g, idx % g);
            for (e, v) in emb.iter().enumerate() {
                let (y, x) = (gy * p + e / p, gx * p + e % p);
                data[(y * size + x) * 3] = *v;
            }
        }
        Image::new(size, data).expect("size matches")
    }
}
