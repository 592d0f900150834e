//! Model configuration, the tensor container, and the feature cache.
//!
//! The weight container uses the safetensors layout: an 8-byte little-endian
//! header length, a UTF-8 JSON header mapping tensor names to
//! `{"dtype": "F32", "shape": [..], "data_offsets": [begin, end]}`, then the
//! raw little-endian byte buffer. Only `F32` is accepted. Key names follow the
//! released DINOv2 checkpoints; see `docs/weights-format.md`.
//!
//! The feature cache is a small fixed binary layout:
//!
//! ```text
//! "ITAEFT01"            8 bytes magic
//! flags                 u32 LE   bit0 = labels present, bit1 = rows L2-normalized
//! n, d                  u64 LE each
//! values                n*d f32 LE, row-major
//! labels                n i64 LE (only when bit0 is set)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::l2_norm;

/// Feed-forward block flavour inside each transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// `fc2(gelu(fc1(x)))`
    #[default]
    Mlp,
    /// `w3(silu(a) * b)` where `[a, b] = w12(x)`; used by the giant variant.
    SwiGlu,
}

fn default_eps() -> f32 {
    1e-6
}

/// Architecture hyperparameters for a standard ViT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f32,
    #[serde(default)]
    pub num_register_tokens: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
    #[serde(default)]
    pub ffn_layer: FfnKind,
    /// Overrides `embed_dim * mlp_ratio` as the feed-forward hidden width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden_dim: Option<usize>,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// `1 + R + N`.
    pub fn seq_len(&self) -> usize {
        1 + self.num_register_tokens + self.num_patches()
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_hidden_dim
            .unwrap_or_else(|| (self.embed_dim as f32 * self.mlp_ratio).round() as usize)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.image_size == 0 {
            return bad("depth, embed_dim and image_size must be positive".into());
        }
        if self.hidden_dim() == 0 {
            return bad("feed-forward hidden width is zero".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad(format!("layer_norm_eps must be > 0, got {}", self.layer_norm_eps));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Every tensor the engine requires, with its exact shape.
    pub fn required_keys(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.hidden_dim();
        let p = self.patch_size;
        let mut keys = vec![
            ("cls_token".to_string(), vec![1, 1, d]),
            ("pos_embed".to_string(), vec![1, 1 + self.num_patches(), d]),
            ("patch_embed.proj.weight".to_string(), vec![d, 3, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![d]),
        ];
        if self.num_register_tokens > 0 {
            keys.push((
                "register_tokens".to_string(),
                vec![1, self.num_register_tokens, d],
            ));
        }
        for i in 0..self.depth {
            let b = |s: &str| format!("blocks.{i}.{s}");
            keys.push((b("norm1.weight"), vec![d]));
            keys.push((b("norm1.bias"), vec![d]));
            keys.push((b("attn.qkv.weight"), vec![3 * d, d]));
            keys.push((b("attn.qkv.bias"), vec![3 * d]));
            keys.push((b("attn.proj.weight"), vec![d, d]));
            keys.push((b("attn.proj.bias"), vec![d]));
            keys.push((b("norm2.weight"), vec![d]));
            keys.push((b("norm2.bias"), vec![d]));
            match self.ffn_layer {
                FfnKind::Mlp => {
                    keys.push((b("mlp.fc1.weight"), vec![h, d]));
                    keys.push((b("mlp.fc1.bias"), vec![h]));
                    keys.push((b("mlp.fc2.weight"), vec![d, h]));
                    keys.push((b("mlp.fc2.bias"), vec![d]));
                }
                FfnKind::SwiGlu => {
                    keys.push((b("mlp.w12.weight"), vec![2 * h, d]));
                    keys.push((b("mlp.w12.bias"), vec![2 * h]));
                    keys.push((b("mlp.w3.weight"), vec![d, h]));
                    keys.push((b("mlp.w3.bias"), vec![d]));
                }
            }
        }
        keys.push(("norm.weight".to_string(), vec![d]));
        keys.push(("norm.bias".to_string(), vec![d]));
        keys
    }

    /// Tensors used when present (layer scale), with their shapes.
    pub fn optional_keys(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        (0..self.depth)
            .flat_map(|i| {
                [
                    (format!("blocks.{i}.ls1.gamma"), vec![d]),
                    (format!("blocks.{i}.ls2.gamma"), vec![d]),
                ]
            })
            .collect()
    }
}

/// One named tensor: shape plus a single owned `f32` blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

/// Keys present in published checkpoints that inference never reads.
const IGNORED_KEYS: &[&str] = &["mask_token"];

/// Immutable map of canonical key to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(key.into(), tensor);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    /// Tensor data, or an error naming the missing key.
    pub fn require(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::tensor(key, "missing"))
    }

    /// Move a tensor out, or fail naming the missing key.
    pub fn remove(&mut self, key: &str) -> Result<Tensor> {
        self.tensors
            .remove(key)
            .ok_or_else(|| Error::tensor(key, "missing"))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Bytes held by tensor blobs; one blob per tensor, nothing else retained.
    pub fn data_bytes(&self) -> usize {
        self.tensors.values().map(|t| t.data.len() * 4).sum()
    }

    /// Parse a container from memory.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Header("file shorter than the 8-byte header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::Header(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end])
                .map_err(|e| Error::Header(e.to_string()))?;
        let buffer = &bytes[header_end..];

        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for (key, value) in header {
            if key == "__metadata__" {
                continue;
            }
            let info: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::tensor(&key, format!("bad header entry: {e}")))?;
            if info.dtype != "F32" {
                return Err(Error::tensor(&key, format!("unsupported dtype {}", info.dtype)));
            }
            let [begin, end] = info.data_offsets;
            if begin > end || end > buffer.len() {
                return Err(Error::tensor(
                    &key,
                    format!(
                        "offsets [{begin}, {end}) out of bounds for {}-byte buffer",
                        buffer.len()
                    ),
                ));
            }
            let numel: usize = info.shape.iter().product();
            if end - begin != numel * 4 {
                return Err(Error::tensor(
                    &key,
                    format!(
                        "shape {:?} needs {} bytes, offsets span {}",
                        info.shape,
                        numel * 4,
                        end - begin
                    ),
                ));
            }
            entries.push((key, info.shape, begin, end));
        }

        entries.sort_by_key(|e| (e.2, e.3));
        for w in entries.windows(2) {
            if w[1].2 < w[0].3 {
                return Err(Error::tensor(
                    &w[1].0,
                    format!("data overlaps tensor `{}`", w[0].0),
                ));
            }
        }

        let mut store = WeightStore::new();
        for (key, shape, begin, end) in entries {
            let data = buffer[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.insert(key, Tensor { shape, data });
        }
        Ok(store)
    }

    /// Serialize into the container layout, tensors in key order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (key, t) in &self.tensors {
            let len = t.data.len() * 4;
            header.insert(
                key.clone(),
                serde_json::json!({
                    "dtype": "F32",
                    "shape": t.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
        while !header_bytes.len().is_multiple_of(8) {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes)
}

pub fn save_weights(path: &Path, store: &WeightStore) -> Result<()> {
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

/// One problem found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyIssue {
    Missing {
        key: String,
        expected: Vec<usize>,
    },
    ShapeMismatch {
        key: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl std::fmt::Display for KeyIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KeyIssue::Missing { key, expected } => {
                write!(f, "missing `{key}` (expected shape {expected:?})")
            }
            KeyIssue::ShapeMismatch {
                key,
                expected,
                found,
            } => write!(f, "`{key}` has shape {found:?}, expected {expected:?}"),
        }
    }
}

/// Exhaustive shape check of `weights` against `cfg`. Unknown keys are logged
/// and otherwise ignored.
pub fn validate_config(cfg: &ModelConfig, weights: &WeightStore) -> Vec<KeyIssue> {
    let mut issues = Vec::new();
    let required = cfg.required_keys();
    let optional = cfg.optional_keys();
    for (key, expected) in &required {
        match weights.get(key) {
            None => issues.push(KeyIssue::Missing {
                key: key.clone(),
                expected: expected.clone(),
            }),
            Some(t) if &t.shape != expected => issues.push(KeyIssue::ShapeMismatch {
                key: key.clone(),
                expected: expected.clone(),
                found: t.shape.clone(),
            }),
            Some(_) => {}
        }
    }
    for (key, expected) in &optional {
        if let Some(t) = weights.get(key) {
            if &t.shape != expected {
                issues.push(KeyIssue::ShapeMismatch {
                    key: key.clone(),
                    expected: expected.clone(),
                    found: t.shape.clone(),
                });
            }
        }
    }
    for key in weights.keys() {
        let known = required.iter().chain(&optional).any(|(k, _)| k == key)
            || IGNORED_KEYS.contains(&key);
        if !known {
            log::warn!("ignoring unknown tensor `{key}`");
        }
    }
    issues
}

/// [`validate_config`] folded into a `Result`.
pub fn ensure_valid(cfg: &ModelConfig, weights: &WeightStore) -> Result<()> {
    cfg.check()?;
    let issues = validate_config(cfg, weights);
    if issues.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
        Err(Error::Config(lines.join("\n")))
    }
}

/// Per-image feature rows, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    labels: Option<Vec<i64>>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>, labels: Option<Vec<i64>>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!(
                "{n}x{d} features need {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} rows", l.len())));
            }
        }
        Ok(Self {
            n,
            d,
            data,
            labels,
            normalized: false,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>, labels: Option<Vec<i64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows have unequal lengths".into()));
        }
        Self::new(n, d, rows.concat(), labels)
    }

    /// Mark rows as unit-normalized after checking each within `1e-5`.
    pub fn mark_normalized(mut self) -> Result<Self> {
        for i in 0..self.n {
            let norm = l2_norm(self.row(i));
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Shape(format!("row {i} has norm {norm}, not unit")));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn with_labels(mut self, labels: Option<Vec<i64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.n {
                return Err(Error::Shape(format!("{} labels for {} rows", l.len(), self.n)));
            }
        }
        self.labels = labels;
        Ok(self)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"ITAEFT01";
const FLAG_LABELS: u32 = 1;
const FLAG_NORMALIZED: u32 = 2;

pub fn encode_feature_cache(f: &FeatureMatrix) -> Result<Vec<u8>> {
    if f.n * f.d == 0 {
        return Err(Error::Cache("refusing to write an empty feature matrix".into()));
    }
    let mut flags = 0u32;
    if f.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if f.normalized {
        flags |= FLAG_NORMALIZED;
    }
    let label_bytes = f.labels.as_ref().map_or(0, |l| l.len() * 8);
    let mut out = Vec::with_capacity(28 + f.data.len() * 4 + label_bytes);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(f.n as u64).to_le_bytes());
    out.extend_from_slice(&(f.d as u64).to_le_bytes());
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &f.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_feature_cache(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 28 {
        return Err(Error::Cache(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CACHE_MAGIC {
        return Err(Error::Cache("bad magic (expected ITAEFT01)".into()));
    }
    let flags = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if flags & !(FLAG_LABELS | FLAG_NORMALIZED) != 0 {
        return Err(Error::Cache(format!("unknown flag bits {flags:#x}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let has_labels = flags & FLAG_LABELS != 0;
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(if has_labels { n * 8 } else { 0 }))
        .and_then(|b| b.checked_add(28))
        .ok_or_else(|| Error::Cache("size overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Cache(format!(
            "size mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let values_end = 28 + n * d * 4;
    let data = bytes[28..values_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = has_labels.then(|| {
        bytes[values_end..]
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    });
    Ok(FeatureMatrix {
        n,
        d,
        data,
        labels,
        normalized: flags & FLAG_NORMALIZED != 0,
    })
}

pub fn write_feature_cache(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let bytes = encode_feature_cache(f)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes)
}
