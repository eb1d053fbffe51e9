//! Patch transformer encoder with a linear classification head.
//!
//! The encoder embeds non-overlapping square patches, prepends a class token,
//! runs pre-norm transformer blocks and reads the final class-token state as the
//! feature vector. The head maps features to class logits. Besides logits the
//! forward pass exposes, per sample, the class-token attention paid to every
//! patch averaged over layers and heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the block MLP.
    pub mlp_dim: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_dim: 256,
            num_classes: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_patches() < 2 {
            return Err(Error::Config("encoder needs at least two patches".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.depth == 0 || self.mlp_dim == 0 || self.channels == 0 {
            return Err(Error::Config("depth, mlp_dim and channels must be positive".into()));
        }
        Ok(())
    }
}

/// Class-token attention per patch, averaged over layers and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary<T> {
    pub scores: Vec<T>,
}

impl<T: Scalar> AttentionSummary<T> {
    pub fn new(scores: Vec<T>) -> Result<Self> {
        if scores.iter().any(|a| !(*a >= T::zero())) {
            return Err(Error::Validation("attention scores must be non-negative".into()));
        }
        if scores.iter().copied().sum::<T>() <= T::zero() {
            return Err(Error::Validation("attention scores must have positive mass".into()));
        }
        Ok(Self { scores })
    }
}

/// Per-patch mixing coefficients for one mixed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec<T> {
    pub i: usize,
    pub j: usize,
    pub lambdas: Vec<T>,
    pub beta_params: (f64, f64),
}

impl<T: Scalar> MixSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= T::zero() && **l <= T::one())) {
            return Err(Error::Validation(format!("mixing coefficient {l} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub features: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub attention: AttentionSummary<T>,
}

/// Graph handles produced by [`VisionTransformer::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    attention: Vec<Var>,
    batch: usize,
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

pub const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Clone, Debug)]
pub struct VisionTransformer<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn init_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).unwrap();
    // truncate at two standard deviations
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).unwrap()
}

impl<T: Scalar> VisionTransformer<T> {
    /// Freshly initialised encoder and head.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let m = config.num_patches();
        let zeros = |n: usize| Tensor::<T>::zeros(&[n]);
        let ones = |n: usize| Tensor::<T>::full(&[n], T::one());

        let patch_w = store.add("encoder.patch.w", xavier(&mut rng, config.patch_dim(), d));
        let patch_b = store.add("encoder.patch.b", zeros(d));
        let cls = store.add("encoder.cls", init_tensor(&mut rng, &[d], 0.02));
        let pos = store.add("encoder.pos", init_tensor(&mut rng, &[m + 1, d], 0.02));
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = |s: &str| format!("encoder.block{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: store.add(p("ln1.g"), ones(d)),
                ln1_b: store.add(p("ln1.b"), zeros(d)),
                qkv_w: store.add(p("qkv.w"), xavier(&mut rng, d, 3 * d)),
                qkv_b: store.add(p("qkv.b"), zeros(3 * d)),
                proj_w: store.add(p("proj.w"), xavier(&mut rng, d, d)),
                proj_b: store.add(p("proj.b"), zeros(d)),
                ln2_g: store.add(p("ln2.g"), ones(d)),
                ln2_b: store.add(p("ln2.b"), zeros(d)),
                fc1_w: store.add(p("fc1.w"), xavier(&mut rng, d, config.mlp_dim)),
                fc1_b: store.add(p("fc1.b"), zeros(config.mlp_dim)),
                fc2_w: store.add(p("fc2.w"), xavier(&mut rng, config.mlp_dim, d)),
                fc2_b: store.add(p("fc2.b"), zeros(d)),
            });
        }
        let norm_g = store.add("encoder.norm.g", ones(d));
        let norm_b = store.add("encoder.norm.b", zeros(d));
        let head_w = store.add("classifier.w", xavier(&mut rng, d, config.num_classes));
        let head_b = store.add("classifier.b", zeros(config.num_classes));
        let layout = Layout { patch_w, patch_b, cls, pos, blocks, norm_g, norm_b, head_w, head_b };
        Ok(Self { config, params: store, layout })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Self { config, params, layout: template.layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn classifier_ids(&self) -> [ParamId; 2] {
        [self.layout.head_w, self.layout.head_b]
    }

    /// Excludes the head from every subsequent optimizer step.
    pub fn freeze_classifier(&mut self) {
        for id in self.classifier_ids() {
            self.params.set_frozen(id, true);
        }
    }

    pub fn unfreeze_classifier(&mut self) {
        for id in self.classifier_ids() {
            self.params.set_frozen(id, false);
        }
    }

    pub fn classifier_frozen(&self) -> bool {
        self.classifier_ids().iter().all(|id| self.params.get(*id).frozen)
    }

    /// Cuts a `[B, C, H, W]` batch into `[B * m, C * p * p]` patch rows.
    pub fn patchify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.config.image_shape();
        let sh = images.shape();
        if sh.len() != 4 || sh[1] != c || sh[2] != h || sh[3] != w {
            return Err(Error::Shape(format!("expected [B, {c}, {h}, {w}] images, got {sh:?}")));
        }
        let b = sh[0];
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let pd = self.config.patch_dim();
        let src = images.data();
        let mut out = vec![T::zero(); b * grid * grid * pd];
        for s in 0..b {
            for gy in 0..grid {
                for gx in 0..grid {
                    let row = (s * grid + gy) * grid + gx;
                    let dst = &mut out[row * pd..(row + 1) * pd];
                    let mut k = 0;
                    for ch in 0..c {
                        for py in 0..p {
                            let off = ((s * c + ch) * h + gy * p + py) * w + gx * p;
                            dst[k..k + p].copy_from_slice(&src[off..off + p]);
                            k += p;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[b * grid * grid, pd], out)
    }

    /// Records the forward pass of a `[B, C, H, W]` batch on `g`.
    pub fn forward(&self, g: &mut Graph<'_, T>, images: &Tensor<T>) -> Result<ForwardVars> {
        let patches = self.patchify(images)?;
        let batch = images.shape()[0];
        let tokens = self.config.num_patches() + 1;
        let lay = &self.layout;
        let x = g.input(patches);
        let (pw, pb) = (g.param(lay.patch_w), g.param(lay.patch_b));
        let emb = g.linear(x, pw, pb);
        let (cls, pos) = (g.param(lay.cls), g.param(lay.pos));
        let mut h = g.tokens(emb, cls, pos, batch);
        let mut attention = Vec::with_capacity(lay.blocks.len());
        for blk in &lay.blocks {
            let (g1, b1) = (g.param(blk.ln1_g), g.param(blk.ln1_b));
            let n1 = g.layer_norm(h, g1, b1);
            let (qw, qb) = (g.param(blk.qkv_w), g.param(blk.qkv_b));
            let qkv = g.linear(n1, qw, qb);
            let att = g.attention(qkv, batch, tokens, self.config.heads);
            attention.push(att);
            let (ow, ob) = (g.param(blk.proj_w), g.param(blk.proj_b));
            let proj = g.linear(att, ow, ob);
            h = g.add(h, proj);
            let (g2, b2) = (g.param(blk.ln2_g), g.param(blk.ln2_b));
            let n2 = g.layer_norm(h, g2, b2);
            let (w1, c1) = (g.param(blk.fc1_w), g.param(blk.fc1_b));
            let f1 = g.linear(n2, w1, c1);
            let a1 = g.gelu(f1);
            let (w2, c2) = (g.param(blk.fc2_w), g.param(blk.fc2_b));
            let f2 = g.linear(a1, w2, c2);
            h = g.add(h, f2);
        }
        let cls_rows = g.select_rows(h, (0..batch).map(|b| b * tokens).collect());
        let (ng, nb) = (g.param(lay.norm_g), g.param(lay.norm_b));
        let features = g.layer_norm(cls_rows, ng, nb);
        let (hw, hb) = (g.param(lay.head_w), g.param(lay.head_b));
        let logits = g.linear(features, hw, hb);
        let probs = g.softmax(logits);
        Ok(ForwardVars { features, logits, probs, attention, batch })
    }

    /// Class-token attention summaries for every sample of a recorded pass.
    pub fn attention_summaries(&self, g: &Graph<'_, T>, fwd: &ForwardVars) -> Vec<AttentionSummary<T>> {
        let m = self.config.num_patches();
        let mut acc = vec![vec![T::zero(); m]; fwd.batch];
        let mut count = 0usize;
        for v in &fwd.attention {
            let (probs, batch, heads, tokens) = g.attention_probs(*v).expect("attention node");
            let nn = tokens * tokens;
            for (b, a) in acc.iter_mut().enumerate().take(batch) {
                for h in 0..heads {
                    let cls_row = &probs[(b * heads + h) * nn..(b * heads + h) * nn + tokens];
                    for (dst, src) in a.iter_mut().zip(&cls_row[1..]) {
                        *dst += *src;
                    }
                }
            }
            count += heads;
        }
        let norm = T::from_usize(count.max(1)).unwrap();
        acc.into_iter()
            .map(|mut a| {
                a.iter_mut().for_each(|v| *v /= norm);
                AttentionSummary { scores: a }
            })
            .collect()
    }

    /// Gradient-free evaluation of a batch, processed in chunks.
    pub fn infer(&self, images: &Tensor<T>, chunk: usize) -> Result<Vec<ForwardOutput<T>>> {
        let b = images.shape().first().copied().unwrap_or(0);
        let per = images.len() / b.max(1);
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(b);
        let mut start = 0;
        while start < b {
            let end = (start + chunk).min(b);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::from_vec(&shape, images.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new(&self.params);
            let fwd = self.forward(&mut g, &part)?;
            let att = self.attention_summaries(&g, &fwd);
            for (i, attention) in att.into_iter().enumerate() {
                out.push(ForwardOutput {
                    features: g.value(fwd.features).row(i).to_vec(),
                    logits: g.value(fwd.logits).row(i).to_vec(),
                    probs: g.value(fwd.probs).row(i).to_vec(),
                    attention,
                });
            }
            start = end;
        }
        Ok(out)
    }
}

/// Patch-wise convex combination of two `[C, H, W]` images.
///
/// Patch `n` of the result is `lambda_n * x_i + (1 - lambda_n) * x_j`.
pub fn mix_patches<T: Scalar>(x_i: &Tensor<T>, x_j: &Tensor<T>, spec: &MixSpec<T>, patch_size: usize) -> Result<Tensor<T>> {
    spec.validate()?;
    if x_i.shape() != x_j.shape() || x_i.shape().len() != 3 {
        return Err(Error::Shape(format!("cannot mix {:?} with {:?}", x_i.shape(), x_j.shape())));
    }
    let (c, h, w) = (x_i.shape()[0], x_i.shape()[1], x_i.shape()[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible into {patch_size}px patches")));
    }
    let gw = w / patch_size;
    let m = (h / patch_size) * gw;
    if spec.lambdas.len() != m {
        return Err(Error::Validation(format!("expected {m} mixing coefficients, got {}", spec.lambdas.len())));
    }
    let (a, b) = (x_i.data(), x_j.data());
    let mut out = vec![T::zero(); a.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let n = (y / patch_size) * gw + x / patch_size;
                let l = spec.lambdas[n];
                let idx = (ch * h + y) * w + x;
                out[idx] = l * a[idx] + (T::one() - l) * b[idx];
            }
        }
    }
    Tensor::from_vec(x_i.shape(), out)
}

/// Floor on the denominator of [`lambda_hat`].
pub const LAMBDA_HAT_EPS: f64 = 1e-8;

/// Attention-rescaled share of the first component in a mixed sample.
pub fn lambda_hat<T: Scalar>(lambdas: &[T], attn_i: &AttentionSummary<T>, attn_j: &AttentionSummary<T>) -> Result<T> {
    if lambdas.len() != attn_i.scores.len() || lambdas.len() != attn_j.scores.len() {
        return Err(Error::Shape("lambda_hat: coefficient and attention lengths differ".into()));
    }
    let mut num = T::zero();
    let mut other = T::zero();
    for ((l, ai), aj) in lambdas.iter().zip(&attn_i.scores).zip(&attn_j.scores) {
        num += *l * *ai;
        other += (T::one() - *l) * *aj;
    }
    let den = (num + other).max(T::from_f64_lossy(LAMBDA_HAT_EPS));
    if !(den > T::zero()) || !den.is_finite() {
        return Err(Error::Numerical(format!("lambda_hat denominator {den}")));
    }
    Ok((num / den).max(T::zero()).min(T::one()))
}
