//! Vision transformer backbone with CLS, register and patch tokens.
//!
//! Token order inside a sequence is `[cls, registers.., patches..]`.
//! Positional embeddings cover the CLS and patch tokens only.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::image::Image;
use crate::nn::{gelu, gelu_backward, gemm, join, LayerNorm, LnCache, Linear, Param, Parameters, Scalar};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const LN_EPS: f64 = 1e-6;

fn default_mlp_ratio() -> usize {
    4
}
fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}
fn default_std() -> [f32; 3] {
    IMAGENET_STD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub registers: usize,
    pub image_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Per-channel input normalization applied inside `forward`.
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
}

impl BackboneConfig {
    pub fn new(depth: usize, width: usize, heads: usize, patch_size: usize, registers: usize, image_size: usize) -> Self {
        Self {
            depth,
            width,
            heads,
            patch_size,
            registers,
            image_size,
            mlp_ratio: 4,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Named sizes: `B`, `S` and the desk-scale `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "B" | "b" => Ok(Self::new(12, 768, 12, 14, 4, 224)),
            "S" | "s" => Ok(Self::new(12, 384, 6, 14, 4, 224)),
            "tiny" => Ok(Self::new(4, 96, 3, 14, 4, 224)),
            other => Err(Error::config(format!("unknown backbone preset `{other}` (expected B, S or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("backbone depth, width, heads, patch size and mlp ratio must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length: CLS + registers + patches.
    pub fn tokens(&self) -> usize {
        1 + self.registers + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// Per-image view of the tokens produced by a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBundle<T> {
    pub cls: Vec<T>,
    /// Row-major `[grid², dim]`.
    pub patches: Vec<T>,
    pub registers: Vec<Vec<T>>,
    pub dim: usize,
    pub grid: usize,
}

impl<T: Scalar> TokenBundle<T> {
    pub fn patch(&self, i: usize) -> &[T] {
        &self.patches[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().chain(&self.patches).chain(self.registers.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Output of a batched forward pass, stored `[batch, tokens, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub registers: usize,
    pub grid: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> TokenBatch<T> {
    fn row(&self, b: usize, t: usize) -> &[T] {
        let o = (b * self.tokens + t) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn cls(&self, b: usize) -> &[T] {
        self.row(b, 0)
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Patch tokens of image `b` as a contiguous `[grid², dim]` block.
    pub fn patches(&self, b: usize) -> &[T] {
        let o = (b * self.tokens + 1 + self.registers) * self.dim;
        &self.data[o..o + self.num_patches() * self.dim]
    }

    pub fn register(&self, b: usize, r: usize) -> &[T] {
        self.row(b, 1 + r)
    }

    /// CLS tokens stacked `[batch, dim]`.
    pub fn cls_matrix(&self) -> Vec<T> {
        (0..self.batch).flat_map(|b| self.cls(b).iter().copied()).collect()
    }

    /// Patch tokens stacked `[batch · grid², dim]`.
    pub fn patch_matrix(&self) -> Vec<T> {
        (0..self.batch).flat_map(|b| self.patches(b).iter().copied()).collect()
    }

    pub fn bundle(&self, b: usize) -> TokenBundle<T> {
        TokenBundle {
            cls: self.cls(b).to_vec(),
            patches: self.patches(b).to_vec(),
            registers: (0..self.registers).map(|r| self.register(b, r).to_vec()).collect(),
            dim: self.dim,
            grid: self.grid,
        }
    }

    pub fn bundles(&self) -> Vec<TokenBundle<T>> {
        (0..self.batch).map(|b| self.bundle(b)).collect()
    }

    /// Gradient buffer shaped like this batch, assembled from per-image CLS
    /// and patch gradients (`[batch, dim]` and `[batch · grid², dim]`).
    /// Register positions receive zero gradient.
    pub fn grad_from_parts(&self, d_cls: Option<&[T]>, d_patches: Option<&[T]>) -> Vec<T> {
        let mut g = vec![T::zero(); self.data.len()];
        let (d, p) = (self.dim, self.num_patches());
        for b in 0..self.batch {
            let base = b * self.tokens * d;
            if let Some(dc) = d_cls {
                g[base..base + d].copy_from_slice(&dc[b * d..(b + 1) * d]);
            }
            if let Some(dp) = d_patches {
                let o = base + (1 + self.registers) * d;
                g[o..o + p * d].copy_from_slice(&dp[b * p * d..(b + 1) * p * d]);
            }
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.qkv.visit_params(&join(prefix, "attn.qkv"), f);
        self.proj.visit_params(&join(prefix, "attn.proj"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.fc1.visit_params(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_params(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_params_mut(&join(prefix, "attn.qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "attn.proj"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_params_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "mlp.fc2"), f);
    }
}

#[derive(Default)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Activations recorded by [`VisionTransformer::forward_train`]. Reusing
/// one cache across steps keeps its buffers allocated.
#[derive(Default)]
pub struct ForwardCache<T> {
    batch: usize,
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
}

/// Weight initialization family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Truncated normal with the given std for every matrix and token.
    TruncNormal(f64),
    /// Uniform(±1/sqrt(fan_in)) for linear layers; keeps activations at
    /// unit scale in randomly initialized frozen networks.
    FanIn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer<T> {
    pub config: BackboneConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Param<T>,
    pub register_tokens: Param<T>,
    /// `[1 + grid², width]`: CLS position first, then patches.
    pub pos_embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

pub type StudentModel = VisionTransformer<f32>;

/// Builds a student backbone with ViT-style truncated-normal initialization.
pub fn build_student<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<VisionTransformer<T>> {
    VisionTransformer::new(config, seed, WeightInit::TruncNormal(0.02))
}

impl<T: Scalar> VisionTransformer<T> {
    pub fn new(config: &BackboneConfig, seed: u64, init: WeightInit) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(derive_seed(seed, &[0x5eed_ba5e]));
        let d = config.width;
        let hidden = config.hidden();
        let linear = |i: usize, o: usize, rng: &mut Rng| match init {
            WeightInit::TruncNormal(std) => Linear::trunc_normal(i, o, std, rng),
            WeightInit::FanIn => Linear::fan_in_uniform(i, o, rng),
        };
        let token_std = match init {
            WeightInit::TruncNormal(std) => std,
            WeightInit::FanIn => 0.02,
        };
        let patch_embed = linear(config.patch_dim(), d, &mut rng);
        let mut cls_token = Param::zeros(&[d], false);
        cls_token.init_trunc_normal(token_std, &mut rng);
        let mut register_tokens = Param::zeros(&[config.registers, d], false);
        register_tokens.init_trunc_normal(token_std, &mut rng);
        let mut pos_embed = Param::zeros(&[1 + config.num_patches(), d], false);
        pos_embed.init_trunc_normal(token_std, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1: LayerNorm::new(d, LN_EPS),
                qkv: linear(d, 3 * d, &mut rng),
                proj: linear(d, d, &mut rng),
                norm2: LayerNorm::new(d, LN_EPS),
                fc1: linear(d, hidden, &mut rng),
                fc2: linear(hidden, d, &mut rng),
                heads: config.heads,
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            register_tokens,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d, LN_EPS),
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn cast<U: Scalar>(&self) -> VisionTransformer<U> {
        VisionTransformer {
            config: self.config.clone(),
            patch_embed: self.patch_embed.cast(),
            cls_token: self.cls_token.cast(),
            register_tokens: self.register_tokens.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: b.norm1.cast(),
                    qkv: b.qkv.cast(),
                    proj: b.proj.cast(),
                    norm2: b.norm2.cast(),
                    fc1: b.fc1.cast(),
                    fc2: b.fc2.cast(),
                    heads: b.heads,
                })
                .collect(),
            norm: self.norm.cast(),
        }
    }

    /// Normalized pixels rearranged into `[batch · grid², 3 · p · p]` rows,
    /// each row ordered `(channel, y, x)`.
    fn patchify(&self, images: &[Image]) -> Result<Vec<T>> {
        let cfg = &self.config;
        let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
        let pd = cfg.patch_dim();
        let mut out = vec![T::zero(); images.len() * g * g * pd];
        for (b, img) in images.iter().enumerate() {
            if img.width != s || img.height != s {
                return Err(Error::shape(format!(
                    "expected {s}×{s} input, got {}×{}",
                    img.width, img.height
                )));
            }
            for c in 0..3 {
                let plane = img.channel(c);
                let (m, sd) = (cfg.mean[c], cfg.std[c]);
                for gy in 0..g {
                    for gx in 0..g {
                        let row = (b * g * g + gy * g + gx) * pd + c * p * p;
                        for py in 0..p {
                            let src = &plane[(gy * p + py) * s + gx * p..][..p];
                            let dst = &mut out[row + py * p..row + (py + 1) * p];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o = T::lit(((v - m) / sd) as f64);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inference forward pass.
    pub fn forward(&self, images: &[Image]) -> Result<TokenBatch<T>> {
        self.run(images, None)
    }

    /// Forward pass that records activations for [`Self::backward`].
    pub fn forward_train(&self, images: &[Image]) -> Result<(TokenBatch<T>, ForwardCache<T>)> {
        let mut cache = ForwardCache::default();
        let out = self.forward_train_into(images, &mut cache)?;
        Ok((out, cache))
    }

    pub fn forward_train_into(&self, images: &[Image], cache: &mut ForwardCache<T>) -> Result<TokenBatch<T>> {
        cache.batch = images.len();
        cache.blocks.resize_with(self.blocks.len(), BlockCache::default);
        self.run(images, Some(cache))
    }

    fn run(&self, images: &[Image], mut cache: Option<&mut ForwardCache<T>>) -> Result<TokenBatch<T>> {
        let cfg = &self.config;
        let (bsz, d, n, r, np) = (images.len(), cfg.width, cfg.tokens(), cfg.registers, cfg.num_patches());
        let rows = bsz * n;
        let patches = self.patchify(images)?;
        let mut emb = vec![T::zero(); bsz * np * d];
        self.patch_embed.forward(&patches, cfg.patch_dim(), bsz * np, &mut emb);

        let mut x = vec![T::zero(); rows * d];
        let pos = &self.pos_embed.value;
        for b in 0..bsz {
            let base = b * n * d;
            for j in 0..d {
                x[base + j] = self.cls_token.value[j] + pos[j];
            }
            x[base + d..base + (1 + r) * d].copy_from_slice(&self.register_tokens.value);
            for i in 0..np {
                let dst = base + (1 + r + i) * d;
                let src = (b * np + i) * d;
                for j in 0..d {
                    x[dst + j] = emb[src + j] + pos[(1 + i) * d + j];
                }
            }
        }
        drop(emb);
        if let Some(c) = cache.as_deref_mut() {
            c.patches = patches;
        }

        let hidden = cfg.hidden();
        let mut h = vec![T::zero(); rows * d];
        let mut qkv = vec![T::zero(); rows * 3 * d];
        let mut attn = vec![T::zero(); rows * d];
        let mut y = vec![T::zero(); rows * d];
        let mut pre = vec![T::zero(); rows * hidden];
        let mut act = vec![T::zero(); rows * hidden];
        for (bi, blk) in self.blocks.iter().enumerate() {
            let mut bc = cache.as_deref_mut().map(|c| &mut c.blocks[bi]);
            blk.norm1.forward(&x, rows, &mut h, bc.as_mut().map(|c| &mut c.ln1));
            blk.qkv.forward(&h, d, rows, &mut qkv);
            let probs = bc.as_mut().map(|c| {
                c.probs.resize(bsz * blk.heads * n * n, T::zero());
                &mut c.probs[..]
            });
            attention_forward(&qkv, bsz, n, d, blk.heads, &mut attn, probs);
            blk.proj.forward(&attn, d, rows, &mut y);
            add_assign(&mut x, &y);
            if let Some(c) = bc.as_mut() {
                c.h1.clone_from(&h);
                c.qkv.clone_from(&qkv);
                c.attn.clone_from(&attn);
            }
            blk.norm2.forward(&x, rows, &mut h, bc.as_mut().map(|c| &mut c.ln2));
            blk.fc1.forward(&h, d, rows, &mut pre);
            gelu(&pre, &mut act);
            blk.fc2.forward(&act, hidden, rows, &mut y);
            add_assign(&mut x, &y);
            if let Some(c) = bc {
                c.h2.clone_from(&h);
                c.pre.clone_from(&pre);
                c.act.clone_from(&act);
            }
        }
        let mut out = vec![T::zero(); rows * d];
        self.norm.forward(&x, rows, &mut out, cache.as_deref_mut().map(|c| &mut c.final_ln));
        Ok(TokenBatch {
            batch: bsz,
            tokens: n,
            dim: d,
            registers: r,
            grid: cfg.grid(),
            data: out,
        })
    }

    /// Accumulates parameter gradients given `d_out`, the loss gradient with
    /// respect to the output tokens (`[batch, tokens, dim]`).
    pub fn backward(&mut self, cache: &ForwardCache<T>, d_out: &[T]) -> Result<()> {
        let cfg = self.config.clone();
        let (bsz, d, n, r, np) = (cache.batch, cfg.width, cfg.tokens(), cfg.registers, cfg.num_patches());
        let rows = bsz * n;
        if d_out.len() != rows * d {
            return Err(Error::shape(format!(
                "token gradient has {} values, expected {}",
                d_out.len(),
                rows * d
            )));
        }
        let hidden = cfg.hidden();
        let mut dx = vec![T::zero(); rows * d];
        self.norm.backward(&cache.final_ln, d_out, &mut dx);

        let mut dact = vec![T::zero(); rows * hidden];
        let mut dh = vec![T::zero(); rows * d];
        let mut dattn = vec![T::zero(); rows * d];
        let mut dqkv = vec![T::zero(); rows * 3 * d];
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::shape("forward cache does not match model depth"));
        }
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dact.iter_mut().for_each(|v| *v = T::zero());
            blk.fc2.backward(&c.act, hidden, rows, &dx, Some((&mut dact, hidden)));
            gelu_backward(&c.pre, &mut dact);
            dh.iter_mut().for_each(|v| *v = T::zero());
            blk.fc1.backward(&c.h2, d, rows, &dact, Some((&mut dh, d)));
            blk.norm2.backward(&c.ln2, &dh, &mut dx);

            dattn.iter_mut().for_each(|v| *v = T::zero());
            blk.proj.backward(&c.attn, d, rows, &dx, Some((&mut dattn, d)));
            attention_backward(&c.qkv, &c.probs, &dattn, bsz, n, d, blk.heads, &mut dqkv);
            dh.iter_mut().for_each(|v| *v = T::zero());
            blk.qkv.backward(&c.h1, d, rows, &dqkv, Some((&mut dh, d)));
            blk.norm1.backward(&c.ln1, &dh, &mut dx);
        }

        let mut demb = vec![T::zero(); bsz * np * d];
        for b in 0..bsz {
            let base = b * n * d;
            for j in 0..d {
                self.cls_token.grad[j] += dx[base + j];
                self.pos_embed.grad[j] += dx[base + j];
            }
            for k in 0..r * d {
                self.register_tokens.grad[k] += dx[base + d + k];
            }
            for i in 0..np {
                let src = base + (1 + r + i) * d;
                let dst = (b * np + i) * d;
                for j in 0..d {
                    let g = dx[src + j];
                    self.pos_embed.grad[(1 + i) * d + j] += g;
                    demb[dst + j] = g;
                }
            }
        }
        self.patch_embed.backward(&cache.patches, cfg.patch_dim(), bsz * np, &demb, None);
        Ok(())
    }
}

impl<T: Scalar> VisionTransformer<T> {
    /// Writes config and parameters under `prefix`.
    pub fn store(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.set_meta(&format!("{prefix}_config"), &self.config)?;
        archive.insert_params(prefix, self);
        Ok(())
    }

    /// Rebuilds a backbone stored with [`Self::store`].
    pub fn restore(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: BackboneConfig = archive.meta(&format!("{prefix}_config"))?;
        let mut m = Self::new(&config, 0, WeightInit::TruncNormal(0.02))?;
        archive.load_params(prefix, &mut m)?;
        Ok(m)
    }
}

impl<T: Scalar> Parameters<T> for VisionTransformer<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.patch_embed.visit_params(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &self.cls_token);
        f(join(prefix, "register_tokens"), &self.register_tokens);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        self.patch_embed.visit_params_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &mut self.cls_token);
        f(join(prefix, "register_tokens"), &mut self.register_tokens);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

fn add_assign<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn softmax_rows<T: Scalar>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        for v in row.iter_mut() {
            *v = (*v - m).exp_fast();
        }
        let inv = T::one() / sum4(row);
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Sum with four independent accumulators.
fn sum4<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = x.chunks_exact(4);
    let tail: T = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for j in 0..4 {
            acc[j] += c[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Multi-head scaled dot-product attention over `qkv` rows laid out
/// `[q | k | v]`, each head occupying a contiguous slice of its third.
fn attention_forward<T: Scalar>(
    qkv: &[T],
    bsz: usize,
    n: usize,
    d: usize,
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let hd = d / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let ld = 3 * d;
    let mut s = vec![T::zero(); n * n];
    for b in 0..bsz {
        let base = b * n * ld;
        for h in 0..heads {
            let q = &qkv[base + h * hd..];
            let k = &qkv[base + d + h * hd..];
            let v = &qkv[base + 2 * d + h * hd..];
            gemm(n, n, hd, scale, q, ld, false, k, ld, true, T::zero(), &mut s, n);
            softmax_rows(&mut s, n);
            gemm(n, hd, n, T::one(), &s, n, false, v, ld, false, T::zero(), &mut out[b * n * d + h * hd..], d);
            if let Some(p) = probs.as_deref_mut() {
                p[(b * heads + h) * n * n..][..n * n].copy_from_slice(&s);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    d_out: &[T],
    bsz: usize,
    n: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let hd = d / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let ld = 3 * d;
    let mut dp = vec![T::zero(); n * n];
    for b in 0..bsz {
        let base = b * n * ld;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * n * n..][..n * n];
            let dout = &d_out[b * n * d + h * hd..];
            let q = &qkv[base + h * hd..];
            let k = &qkv[base + d + h * hd..];
            let v = &qkv[base + 2 * d + h * hd..];
            gemm(n, n, hd, T::one(), dout, d, false, v, ld, true, T::zero(), &mut dp, n);
            gemm(n, hd, n, T::one(), p, n, true, dout, d, false, T::zero(), &mut dqkv[base + 2 * d + h * hd..], ld);
            for (pr, gr) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot: T = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in gr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gemm(n, hd, n, T::one(), &dp, n, false, k, ld, false, T::zero(), &mut dqkv[base + h * hd..], ld);
            gemm(n, hd, n, T::one(), &dp, n, true, q, ld, false, T::zero(), &mut dqkv[base + d + h * hd..], ld);
        }
    }
}

/// `shadow ← decay · shadow + (1 − decay) · student`, elementwise.
pub fn ema_update<T: Scalar, M: Parameters<T>>(student: &M, shadow: &mut M, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::config(format!("EMA decay {decay} outside [0, 1]")));
    }
    let src = student.params();
    let mut dst = shadow.params_mut();
    if src.len() != dst.len() {
        return Err(Error::shape("EMA parameter lists differ in length"));
    }
    for ((sn, s), (dn, t)) in src.iter().zip(&dst) {
        if sn != dn || s.shape != t.shape {
            return Err(Error::shape(format!("EMA parameter mismatch: {sn} {:?} vs {dn} {:?}", s.shape, t.shape)));
        }
    }
    let (a, b) = (T::lit(decay), T::lit(1.0 - decay));
    for ((_, s), (_, t)) in src.iter().zip(dst.iter_mut()) {
        for (tv, &sv) in t.value.iter_mut().zip(&s.value) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployedCost {
    pub params: usize,
    /// Multiply-accumulates of every linear layer (patch embedding, qkv,
    /// output projection, MLP) times two.
    pub flops: u64,
    /// The `QKᵀ` and `PV` products, reported separately.
    pub attention_matmul_flops: u64,
}

/// Exact parameter count and FLOP estimate for one image at `image_size`.
pub fn deployed_cost(config: &BackboneConfig, image_size: usize) -> Result<DeployedCost> {
    let cfg = BackboneConfig {
        image_size,
        ..config.clone()
    };
    cfg.validate()?;
    let (d, h, l) = (cfg.width, cfg.hidden(), cfg.depth);
    let np = cfg.num_patches();
    let n = cfg.tokens() as u64;
    let block_params = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
    let params = cfg.patch_dim() * d + d + d + cfg.registers * d + (1 + np) * d + l * block_params + 2 * d;
    let (d64, h64) = (d as u64, h as u64);
    let embed_macs = np as u64 * cfg.patch_dim() as u64 * d64;
    let block_macs = n * (3 * d64 * d64 + d64 * d64 + 2 * d64 * h64);
    let flops = 2 * (embed_macs + l as u64 * block_macs);
    let attention_matmul_flops = 2 * l as u64 * 2 * n * n * d64;
    Ok(DeployedCost {
        params,
        flops,
        attention_matmul_flops,
    })
}
