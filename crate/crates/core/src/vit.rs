//! Pre-norm ViT forward pass with a hook on the final block's attention.
//!
//! The pass is split in two: [`Vit::forward_prefix`] runs the patch embedding,
//! every block but the last, and the final block up to its pre-softmax
//! logits; [`Vit::complete`] applies an [`EngineeringPlan`] to those logits
//! and finishes the block and the final norm. Anything before the final
//! softmax is therefore identical with and without engineering, and threshold
//! sweeps can reuse one prefix for many plans.
//!
//! Token layout is `[CLS, reg_1..reg_R, patch_1..patch_N]`. Positional
//! embeddings are added to CLS and patches only; registers get none.

use crate::artifacts::{identify_artifacts, token_norms, ArtifactSet, NormSource};
use crate::engineering::{apply_plan, validate_artifacts, ArtifactRule, EngineeringPlan};
use crate::error::{Error, Result};
use crate::model_io::{ensure_valid, FeatureMatrix, FfnKind, ModelConfig, Tensor, WeightStore};
use crate::numerics::{
    dot, gelu_scalar, l2_normalize, layer_norm_rows, linear, silu_scalar, softmax_in_place,
    Matrix,
};
use crate::par::{self, Execution};

/// Preprocessed RGB image, `size × size × 3`, height-width-channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "{size}x{size}x3 image needs {} values, got {}",
                size * size * 3,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * 3 + c]
    }
}

/// Per-head tensors of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors {
    pub layer: usize,
    /// One `T × d_k` matrix per head.
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// `H × T`: row 0 of `QKᵀ/√d_k` for every head, before engineering.
    pub row0_logits: Matrix,
    /// Full `T × T` pre-engineering logits per head, kept only when the plan
    /// edits more than row 0 or masks the diagonal.
    pub full_logits: Option<Vec<Matrix>>,
}

impl AttentionTensors {
    pub fn num_heads(&self) -> usize {
        self.q.len()
    }

    pub fn seq_len(&self) -> usize {
        self.q.first().map_or(0, Matrix::rows)
    }

    pub fn source(&self, source: NormSource) -> Option<&[Matrix]> {
        match source {
            NormSource::Query => Some(&self.q),
            NormSource::Key => Some(&self.k),
            NormSource::Value => Some(&self.v),
            NormSource::Output => None,
        }
    }
}

/// Residual stream entering the final block plus its attention inputs.
#[derive(Debug, Clone)]
pub struct FinalLayerState {
    input: Matrix,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    logits: Vec<Matrix>,
}

impl FinalLayerState {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Unengineered `T × T` logits per head.
    pub fn logits(&self) -> &[Matrix] {
        &self.logits
    }

    pub fn q(&self) -> &[Matrix] {
        &self.q
    }

    pub fn k(&self) -> &[Matrix] {
        &self.k
    }

    pub fn v(&self) -> &[Matrix] {
        &self.v
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// CLS token after the final layer norm.
    pub cls_feature: Vec<f32>,
    /// Tokens `1..T` (registers then patches) after the final layer norm.
    pub token_outputs: Matrix,
    pub attention: AttentionTensors,
    /// `H × T` softmaxed row 0 after engineering.
    pub attn_weights_row0: Matrix,
    /// Artifact set that was attenuated, when the plan named or detected one.
    pub artifacts: Option<ArtifactSet>,
}

impl ForwardOutput {
    /// Patch rows only, registers dropped.
    pub fn patch_outputs(&self, num_registers: usize) -> Matrix {
        let n = self.token_outputs.rows() - num_registers;
        let d = self.token_outputs.cols();
        Matrix::from_vec(
            n,
            d,
            self.token_outputs.data()[num_registers * d..].to_vec(),
        )
        .expect("slice has n*d values")
    }
}

#[derive(Debug, Clone)]
enum Ffn {
    Mlp {
        fc1_w: Matrix,
        fc1_b: Vec<f32>,
        fc2_w: Matrix,
        fc2_b: Vec<f32>,
    },
    SwiGlu {
        w12_w: Matrix,
        w12_b: Vec<f32>,
        w3_w: Matrix,
        w3_b: Vec<f32>,
    },
}

#[derive(Debug, Clone)]
struct Block {
    norm1_g: Vec<f32>,
    norm1_b: Vec<f32>,
    qkv_w: Matrix,
    qkv_b: Vec<f32>,
    proj_w: Matrix,
    proj_b: Vec<f32>,
    norm2_g: Vec<f32>,
    norm2_b: Vec<f32>,
    ffn: Ffn,
    ls1: Option<Vec<f32>>,
    ls2: Option<Vec<f32>>,
}

/// A validated model ready for inference. Immutable and `Sync`.
#[derive(Debug, Clone)]
pub struct Vit {
    cfg: ModelConfig,
    cls_token: Vec<f32>,
    register_tokens: Matrix,
    pos_embed: Matrix,
    patch_w: Matrix,
    patch_b: Vec<f32>,
    blocks: Vec<Block>,
    norm_g: Vec<f32>,
    norm_b: Vec<f32>,
}

struct Take(WeightStore);

impl Take {
    fn vec(&mut self, key: &str) -> Result<Vec<f32>> {
        self.0.remove(key).map(|t| t.data)
    }

    fn mat(&mut self, key: &str) -> Result<Matrix> {
        let Tensor { shape, data } = self.0.remove(key)?;
        let rows = shape[0];
        let cols = shape[1..].iter().product();
        Matrix::from_vec(rows, cols, data)
    }

    fn opt(&mut self, key: &str) -> Option<Vec<f32>> {
        self.0.remove(key).ok().map(|t| t.data)
    }
}

type HeadTensors = (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>, Vec<Matrix>);

impl Vit {
    /// Validate `weights` against `cfg` and take ownership of the tensors.
    pub fn new(cfg: ModelConfig, weights: WeightStore) -> Result<Self> {
        ensure_valid(&cfg, &weights)?;
        let d = cfg.embed_dim;
        let mut w = Take(weights);
        let register_tokens = if cfg.num_register_tokens > 0 {
            let t = w.vec("register_tokens")?;
            Matrix::from_vec(cfg.num_register_tokens, d, t)?
        } else {
            Matrix::zeros(0, d)
        };
        let pos = w.vec("pos_embed")?;
        let pos_embed = Matrix::from_vec(1 + cfg.num_patches(), d, pos)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let k = |s: &str| format!("blocks.{i}.{s}");
            let ffn = match cfg.ffn_layer {
                FfnKind::Mlp => Ffn::Mlp {
                    fc1_w: w.mat(&k("mlp.fc1.weight"))?,
                    fc1_b: w.vec(&k("mlp.fc1.bias"))?,
                    fc2_w: w.mat(&k("mlp.fc2.weight"))?,
                    fc2_b: w.vec(&k("mlp.fc2.bias"))?,
                },
                FfnKind::SwiGlu => Ffn::SwiGlu {
                    w12_w: w.mat(&k("mlp.w12.weight"))?,
                    w12_b: w.vec(&k("mlp.w12.bias"))?,
                    w3_w: w.mat(&k("mlp.w3.weight"))?,
                    w3_b: w.vec(&k("mlp.w3.bias"))?,
                },
            };
            blocks.push(Block {
                norm1_g: w.vec(&k("norm1.weight"))?,
                norm1_b: w.vec(&k("norm1.bias"))?,
                qkv_w: w.mat(&k("attn.qkv.weight"))?,
                qkv_b: w.vec(&k("attn.qkv.bias"))?,
                proj_w: w.mat(&k("attn.proj.weight"))?,
                proj_b: w.vec(&k("attn.proj.bias"))?,
                norm2_g: w.vec(&k("norm2.weight"))?,
                norm2_b: w.vec(&k("norm2.bias"))?,
                ffn,
                ls1: w.opt(&k("ls1.gamma")),
                ls2: w.opt(&k("ls2.gamma")),
            });
        }
        Ok(Self {
            cls_token: w.vec("cls_token")?,
            register_tokens,
            pos_embed,
            patch_w: w.mat("patch_embed.proj.weight")?,
            patch_b: w.vec("patch_embed.proj.bias")?,
            blocks,
            norm_g: w.vec("norm.weight")?,
            norm_b: w.vec("norm.bias")?,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Patch embedding, CLS/register prepending and positional embeddings.
    pub fn embed(&self, image: &Image) -> Result<Matrix> {
        let cfg = &self.cfg;
        if image.size() != cfg.image_size {
            return Err(Error::Shape(format!(
                "image is {0}x{0}, model expects {1}x{1} (positional embeddings are not interpolated)",
                image.size(),
                cfg.image_size
            )));
        }
        let (d, p, g, r) = (
            cfg.embed_dim,
            cfg.patch_size,
            cfg.grid_size(),
            cfg.num_register_tokens,
        );
        let mut tokens = Matrix::zeros(cfg.seq_len(), d);
        for (o, (c, pe)) in tokens
            .row_mut(0)
            .iter_mut()
            .zip(self.cls_token.iter().zip(self.pos_embed.row(0)))
        {
            *o = c + pe;
        }
        for i in 0..r {
            tokens
                .row_mut(1 + i)
                .copy_from_slice(self.register_tokens.row(i));
        }
        // Flattened patch in the conv weight's [channel][y][x] order.
        let mut patch = vec![0.0f32; 3 * p * p];
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            patch[(c * p + y) * p + x] = image.pixel(gy * p + y, gx * p + x, c);
                        }
                    }
                }
                let idx = gy * g + gx;
                let pos = self.pos_embed.row(1 + idx);
                let out = tokens.row_mut(1 + r + idx);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (dot(&patch, self.patch_w.row(j)) + self.patch_b[j]) + pos[j];
                }
            }
        }
        Ok(tokens)
    }

    /// Per-head `(q, k, v, logits)`.
    fn attention_inputs(&self, block: &Block, x: &Matrix) -> Result<HeadTensors> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let dk = self.cfg.head_dim();
        let xn = layer_norm_rows(x, &block.norm1_g, &block.norm1_b, self.cfg.layer_norm_eps)?;
        let qkv = linear(&xn, &block.qkv_w, Some(&block.qkv_b))?;
        let scale = 1.0 / (dk as f32).sqrt();
        let mut q = Vec::with_capacity(heads);
        let mut k = Vec::with_capacity(heads);
        let mut v = Vec::with_capacity(heads);
        let mut logits = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qkv.column_block(h * dk, dk);
            let kh = qkv.column_block(d + h * dk, dk);
            let vh = qkv.column_block(2 * d + h * dk, dk);
            let t = qh.rows();
            let mut lh = Matrix::zeros(t, t);
            for i in 0..t {
                for j in 0..t {
                    lh.set(i, j, dot(qh.row(i), kh.row(j)) * scale);
                }
            }
            q.push(qh);
            k.push(kh);
            v.push(vh);
            logits.push(lh);
        }
        Ok((q, k, v, logits))
    }

    /// Finish a block from its (possibly edited) logits.
    fn finish_block(&self, block: &Block, x: &Matrix, mut logits: Vec<Matrix>, v: &[Matrix]) -> Result<(Matrix, Matrix)> {
        let dk = self.cfg.head_dim();
        let t = x.rows();
        let d = self.cfg.embed_dim;
        let mut row0 = Matrix::zeros(logits.len(), t);
        let mut concat = Matrix::zeros(t, d);
        for (h, (lh, vh)) in logits.iter_mut().zip(v).enumerate() {
            for i in 0..t {
                softmax_in_place(lh.row_mut(i))?;
            }
            row0.row_mut(h).copy_from_slice(lh.row(0));
            for i in 0..t {
                let a = lh.row(i);
                let out = &mut concat.row_mut(i)[h * dk..(h + 1) * dk];
                for (j, &w) in a.iter().enumerate() {
                    for (o, &val) in out.iter_mut().zip(vh.row(j)) {
                        *o += w * val;
                    }
                }
            }
        }
        let attn_out = linear(&concat, &block.proj_w, Some(&block.proj_b))?;
        let mut x1 = x.clone();
        add_scaled(&mut x1, &attn_out, block.ls1.as_deref());
        let xn = layer_norm_rows(&x1, &block.norm2_g, &block.norm2_b, self.cfg.layer_norm_eps)?;
        let ffn_out = match &block.ffn {
            Ffn::Mlp {
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            } => {
                let mut hdn = linear(&xn, fc1_w, Some(fc1_b))?;
                for v in hdn.data_mut() {
                    *v = gelu_scalar(*v);
                }
                linear(&hdn, fc2_w, Some(fc2_b))?
            }
            Ffn::SwiGlu {
                w12_w,
                w12_b,
                w3_w,
                w3_b,
            } => {
                let x12 = linear(&xn, w12_w, Some(w12_b))?;
                let half = x12.cols() / 2;
                let mut hdn = Matrix::zeros(t, half);
                for i in 0..t {
                    let src = x12.row(i);
                    for (j, o) in hdn.row_mut(i).iter_mut().enumerate() {
                        *o = silu_scalar(src[j]) * src[half + j];
                    }
                }
                linear(&hdn, w3_w, Some(w3_b))?
            }
        };
        add_scaled(&mut x1, &ffn_out, block.ls2.as_deref());
        Ok((x1, row0))
    }

    /// Everything up to the final block's pre-softmax logits.
    pub fn forward_prefix(&self, image: &Image) -> Result<FinalLayerState> {
        let mut x = self.embed(image)?;
        let (last, body) = self.blocks.split_last().expect("depth >= 1");
        for block in body {
            let (_, _, v, logits) = self.attention_inputs(block, &x)?;
            x = self.finish_block(block, &x, logits, &v)?.0;
        }
        let (q, k, v, logits) = self.attention_inputs(last, &x)?;
        Ok(FinalLayerState {
            input: x,
            q,
            k,
            v,
            logits,
        })
    }

    /// Resolve the plan's artifact set for this image.
    fn resolve(&self, state: &FinalLayerState, plan: &EngineeringPlan) -> Result<Option<ArtifactSet>> {
        let t = self.cfg.seq_len();
        match &plan.artifacts {
            ArtifactRule::None => Ok(None),
            ArtifactRule::Fixed(indices) => {
                validate_artifacts(indices, t)?;
                let mut indices = indices.clone();
                indices.sort_unstable();
                indices.dedup();
                Ok(Some(ArtifactSet::fixed(indices)))
            }
            ArtifactRule::Detect {
                source,
                theta,
                mode,
            } => {
                let norms = self.norms(state, *source)?;
                Ok(Some(identify_artifacts(&norms, *theta, *mode)?))
            }
        }
    }

    /// Per-token norms of tokens `1..T` of the unengineered final layer.
    /// The output source finishes one unengineered pass to get them.
    pub fn norms(&self, state: &FinalLayerState, source: NormSource) -> Result<Vec<f32>> {
        match source {
            NormSource::Output => {
                let base = self.complete(state, None)?;
                token_norms(&base.attention, Some(&base.token_outputs), source)
            }
            _ => token_norms(&self.attention_view(state, false), None, source),
        }
    }

    fn attention_view(&self, state: &FinalLayerState, full: bool) -> AttentionTensors {
        let t = self.cfg.seq_len();
        let mut row0 = Matrix::zeros(state.logits.len(), t);
        for (h, l) in state.logits.iter().enumerate() {
            row0.row_mut(h).copy_from_slice(l.row(0));
        }
        AttentionTensors {
            layer: self.cfg.depth - 1,
            q: state.q.clone(),
            k: state.k.clone(),
            v: state.v.clone(),
            row0_logits: row0,
            full_logits: full.then(|| state.logits.clone()),
        }
    }

    /// Apply `plan` to the final-layer logits and finish the pass.
    pub fn complete(&self, state: &FinalLayerState, plan: Option<&EngineeringPlan>) -> Result<ForwardOutput> {
        let last = self.blocks.last().expect("depth >= 1");
        let mut logits = state.logits.clone();
        let artifacts = match plan {
            None => None,
            Some(plan) => {
                let set = self.resolve(state, plan)?;
                let indices = set.as_ref().map_or(&[][..], |s| s.indices());
                apply_plan(&mut logits, indices, plan)?;
                set
            }
        };
        let (x, row0) = self.finish_block(last, &state.input, logits, &state.v)?;
        let y = layer_norm_rows(&x, &self.norm_g, &self.norm_b, self.cfg.layer_norm_eps)?;
        let d = self.cfg.embed_dim;
        let token_outputs = Matrix::from_vec(y.rows() - 1, d, y.data()[d..].to_vec())?;
        Ok(ForwardOutput {
            cls_feature: y.row(0).to_vec(),
            token_outputs,
            attention: self.attention_view(state, plan.is_some_and(EngineeringPlan::needs_full_logits)),
            attn_weights_row0: row0,
            artifacts,
        })
    }

    pub fn forward(&self, image: &Image, plan: Option<&EngineeringPlan>) -> Result<ForwardOutput> {
        let state = self.forward_prefix(image)?;
        self.complete(&state, plan)
    }

    /// L2-normalized CLS feature of one image plus the attenuated set.
    pub fn feature(&self, image: &Image, plan: Option<&EngineeringPlan>) -> Result<(Vec<f32>, Option<ArtifactSet>)> {
        let out = self.forward(image, plan)?;
        Ok((l2_normalize(&out.cls_feature)?, out.artifacts))
    }
}

fn add_scaled(x: &mut Matrix, delta: &Matrix, scale: Option<&[f32]>) {
    let d = x.cols();
    for i in 0..x.rows() {
        let src = &delta.data()[i * d..(i + 1) * d];
        let dst = x.row_mut(i);
        match scale {
            Some(g) => {
                for ((o, s), gv) in dst.iter_mut().zip(src).zip(g) {
                    *o += s * gv;
                }
            }
            None => {
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
    }
}

/// One normalized CLS row per image, in input order, independent of the
/// worker count. Errors carry the index of the failing image.
pub fn extract_features(
    vit: &Vit,
    images: &[Image],
    plan: Option<&EngineeringPlan>,
    labels: Option<Vec<i64>>,
    exec: Execution,
) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let rows = par::try_map_range(exec, images.len(), |i| {
        vit.feature(&images[i], plan)
            .map(|(f, _)| f)
            .map_err(|e| Error::Image {
                id: format!("#{i}"),
                source: Box::new(e),
            })
    })?;
    FeatureMatrix::from_rows(rows, labels)?.mark_normalized()
}
