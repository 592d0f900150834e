//! Loop-based f64 reference implementations used as test oracles. Nothing
//! here calls into the engine's numerics; weights are read straight from the
//! store by key.

#![allow(dead_code)]

use vitclust::model_io::{FfnKind, ModelConfig, WeightStore};
use vitclust::Image;

fn w(store: &WeightStore, key: &str) -> Vec<f64> {
    store
        .get(key)
        .unwrap_or_else(|| panic!("missing {key}"))
        .data
        .iter()
        .map(|&v| v as f64)
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * g[i] + b[i]).collect()
}

/// `y[o] = Σ_i W[o][i] x[i] + b[o]` with `W` row-major `out × in`.
fn affine(wt: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let inp = x.len();
    (0..b.len())
        .map(|o| {
            let mut s = b[o];
            for i in 0..inp {
                s += wt[o * inp + i] * x[i];
            }
            s
        })
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Token sequence `[CLS, registers…, patches…]` before the first block.
pub fn reference_tokens(cfg: &ModelConfig, store: &WeightStore, img: &Image) -> Vec<Vec<f64>> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let g = cfg.image_size / p;
    let pos = w(store, "pos_embed");
    let cls = w(store, "cls_token");
    let pw = w(store, "patch_embed.proj.weight");
    let pb = w(store, "patch_embed.proj.bias");
    let mut tokens = Vec::new();
    tokens.push((0..d).map(|e| cls[e] + pos[e]).collect::<Vec<_>>());
    if cfg.num_register_tokens > 0 {
        let regs = w(store, "register_tokens");
        for r in 0..cfg.num_register_tokens {
            tokens.push(regs[r * d..(r + 1) * d].to_vec());
        }
    }
    for gy in 0..g {
        for gx in 0..g {
            let idx = gy * g + gx;
            let mut t = vec![0.0; d];
            for e in 0..d {
                let mut s = pb[e];
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            let wv = pw[((e * 3 + c) * p + y) * p + x];
                            s += wv * img.pixel(gy * p + y, gx * p + x, c) as f64;
                        }
                    }
                }
                t[e] = s + pos[(1 + idx) * d + e];
            }
            tokens.push(t);
        }
    }
    tokens
}

/// CLS output after the final layer norm.
pub fn reference_cls(cfg: &ModelConfig, store: &WeightStore, img: &Image) -> Vec<f64> {
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dk = d / heads;
    let eps = cfg.layer_norm_eps as f64;
    let mut x = reference_tokens(cfg, store, img);
    let t = x.len();
    for blk in 0..cfg.depth {
        let k = |s: &str| format!("blocks.{blk}.{s}");
        let (n1g, n1b) = (w(store, &k("norm1.weight")), w(store, &k("norm1.bias")));
        let (qkv_w, qkv_b) = (w(store, &k("attn.qkv.weight")), w(store, &k("attn.qkv.bias")));
        let (pw, pb) = (w(store, &k("attn.proj.weight")), w(store, &k("attn.proj.bias")));
        let (n2g, n2b) = (w(store, &k("norm2.weight")), w(store, &k("norm2.bias")));
        let ls1 = store.get(&k("ls1.gamma")).map(|_| w(store, &k("ls1.gamma")));
        let ls2 = store.get(&k("ls2.gamma")).map(|_| w(store, &k("ls2.gamma")));

        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|tok| affine(&qkv_w, &qkv_b, &layer_norm(tok, &n1g, &n1b, eps)))
            .collect();
        let mut concat = vec![vec![0.0; d]; t];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for c in 0..dk {
                        s += qkv[i][h * dk + c] * qkv[j][d + h * dk + c];
                    }
                    scores[j] = s / (dk as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..t {
                    let a = (scores[j] - m).exp() / z;
                    for c in 0..dk {
                        concat[i][h * dk + c] += a * qkv[j][2 * d + h * dk + c];
                    }
                }
            }
        }
        for i in 0..t {
            let o = affine(&pw, &pb, &concat[i]);
            for e in 0..d {
                x[i][e] += o[e] * ls1.as_ref().map_or(1.0, |g| g[e]);
            }
            let xn = layer_norm(&x[i], &n2g, &n2b, eps);
            let f = match cfg.ffn_layer {
                FfnKind::Mlp => {
                    let h1 = affine(&w(store, &k("mlp.fc1.weight")), &w(store, &k("mlp.fc1.bias")), &xn);
                    let h1: Vec<f64> = h1.into_iter().map(gelu_tanh).collect();
                    affine(&w(store, &k("mlp.fc2.weight")), &w(store, &k("mlp.fc2.bias")), &h1)
                }
                FfnKind::SwiGlu => {
                    let h12 = affine(&w(store, &k("mlp.w12.weight")), &w(store, &k("mlp.w12.bias")), &xn);
                    let half = h12.len() / 2;
                    let hid: Vec<f64> = (0..half).map(|j| silu(h12[j]) * h12[half + j]).collect();
                    affine(&w(store, &k("mlp.w3.weight")), &w(store, &k("mlp.w3.bias")), &hid)
                }
            };
            for e in 0..d {
                x[i][e] += f[e] * ls2.as_ref().map_or(1.0, |g| g[e]);
            }
        }
    }
    layer_norm(&x[0], &w(store, "norm.weight"), &w(store, "norm.bias"), eps)
}

/// `sqrt(Σ_h Σ_j (P[h][i][j] / √d_p)²)` for `i` in `1..T`, from nested loops.
pub fn reference_norms(heads: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let t = heads[0].len();
    let dp = heads[0][0].len() as f64;
    (1..t)
        .map(|i| {
            let mut s = 0.0;
            for h in heads {
                for v in &h[i] {
                    let scaled = v / dp.sqrt();
                    s += scaled * scaled;
                }
            }
            s.sqrt()
        })
        .collect()
}

/// Best one-to-one matching by trying every permutation.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let size = kp.max(kt);
    let mut perm: Vec<usize> = (0..size).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let hits = pred.iter().zip(truth).filter(|(a, b)| p[**a] == **b).count();
        best = best.max(hits);
    });
    best as f64 / pred.len() as f64
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

/// Adjusted Rand index from an explicit loop over all pairs.
pub fn pair_counting_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut both, mut same_p, mut same_t) = (0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let sp = pred[i] == pred[j];
            let st = truth[i] == truth[j];
            same_p += sp as u8 as f64;
            same_t += st as u8 as f64;
            both += (sp && st) as u8 as f64;
        }
    }
    let total = (n * (n - 1) / 2) as f64;
    let expected = same_p * same_t / total;
    let max = 0.5 * (same_p + same_t);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Arithmetic-mean NMI from probability sums over label values.
pub fn direct_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let p = |c: usize| pred.iter().filter(|&&x| x == c).count() as f64 / n;
    let q = |c: usize| truth.iter().filter(|&&x| x == c).count() as f64 / n;
    let h = |probs: Vec<f64>| -> f64 { probs.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum() };
    let hp = h((0..kp).map(p).collect());
    let ht = h((0..kt).map(q).collect());
    if hp == 0.0 && ht == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for a in 0..kp {
        for b in 0..kt {
            let joint = pred.iter().zip(truth).filter(|(x, y)| **x == a && **y == b).count() as f64 / n;
            if joint > 0.0 {
                mi += joint * (joint / (p(a) * q(b))).ln();
            }
        }
    }
    2.0 * mi / (hp + ht)
}
