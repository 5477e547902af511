//! Frozen teacher encoders behind a uniform interface.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::image::Image;
use crate::model::{BackboneConfig, TokenBatch, VisionTransformer, WeightInit, IMAGENET_MEAN, IMAGENET_STD};
use crate::nn::{Parameters, Scalar};
use crate::{Error, Result};

pub const TEACHER_INPUT_SIZE: usize = 224;
/// Normalization constants of synthetic teachers, matched to H&E-like
/// tiles (pink/purple, low contrast) rather than natural images.
pub const STAIN_MEAN: [f32; 3] = [0.77, 0.56, 0.78];
pub const STAIN_STD: [f32; 3] = [0.085, 0.075, 0.057];
pub const STANDARDIZE_EPS: f64 = 1e-6;

fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}
fn default_std() -> [f32; 3] {
    IMAGENET_STD
}
fn default_loader() -> String {
    "synthetic".into()
}
fn default_depth() -> usize {
    2
}

/// Declaration of one teacher: output geometry, preprocessing and the
/// plug-in that produces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub name: String,
    pub dim: usize,
    /// Patch grid side at 224 px input.
    pub grid: usize,
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
    #[serde(default = "default_loader")]
    pub loader: String,
    /// Initialization seed for the `synthetic` loader.
    #[serde(default)]
    pub seed: u64,
    /// Transformer depth for the `synthetic` loader.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Archive path for the `checkpoint` loader; falls back to
    /// `PATHRYOSHKA_TEACHER_<NAME>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains('/') {
            return Err(Error::config(format!("invalid teacher name `{}`", self.name)));
        }
        if self.dim == 0 || self.grid == 0 {
            return Err(Error::config(format!("teacher `{}` needs dim ≥ 1 and grid ≥ 1", self.name)));
        }
        Ok(())
    }

    /// Environment variable consulted for the checkpoint path.
    pub fn env_var(&self) -> String {
        let up: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        format!("PATHRYOSHKA_TEACHER_{up}")
    }
}

/// A frozen encoder. Inputs are raw RGB in `[0, 1]`; preprocessing happens
/// inside.
pub trait Teacher: Send + Sync {
    fn spec(&self) -> &TeacherSpec;
    fn forward(&self, images: &[Image]) -> Result<TokenBatch<f32>>;
    fn param_checksum(&self) -> u64;
}

/// Spec of a small randomly initialized transformer teacher.
pub fn make_synthetic_teacher(seed: u64, dim: usize, grid: usize) -> Result<TeacherSpec> {
    if dim < 8 {
        return Err(Error::config(format!("synthetic teacher dim {dim} < 8")));
    }
    Ok(TeacherSpec {
        name: format!("synthetic-{seed}"),
        dim,
        grid,
        mean: STAIN_MEAN,
        std: STAIN_STD,
        loader: "synthetic".into(),
        seed,
        depth: 2,
        checkpoint: None,
    })
}

/// Teacher backed by one of our own backbones.
pub struct BackboneTeacher {
    spec: TeacherSpec,
    model: VisionTransformer<f32>,
}

impl BackboneTeacher {
    pub fn synthetic(spec: &TeacherSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dim < 8 {
            return Err(Error::config(format!("synthetic teacher dim {} < 8", spec.dim)));
        }
        if TEACHER_INPUT_SIZE % spec.grid != 0 {
            return Err(Error::config(format!("grid {} does not divide {TEACHER_INPUT_SIZE}", spec.grid)));
        }
        if !(1..=4).contains(&spec.depth) {
            return Err(Error::config(format!("synthetic teacher depth {} outside 1..=4", spec.depth)));
        }
        let heads = [4, 2, 1].into_iter().find(|h| spec.dim % h == 0).unwrap_or(1);
        let mut config = BackboneConfig::new(spec.depth, spec.dim, heads, TEACHER_INPUT_SIZE / spec.grid, 0, TEACHER_INPUT_SIZE);
        config.mean = spec.mean;
        config.std = spec.std;
        let model = VisionTransformer::new(&config, spec.seed, WeightInit::FanIn)?;
        Ok(Self {
            spec: spec.clone(),
            model,
        })
    }

    pub fn from_model(spec: &TeacherSpec, model: VisionTransformer<f32>) -> Result<Self> {
        spec.validate()?;
        if model.config.width != spec.dim || model.config.grid() != spec.grid {
            return Err(Error::shape(format!(
                "teacher `{}` declares dim {} grid {}, model has dim {} grid {}",
                spec.name,
                spec.dim,
                spec.grid,
                model.config.width,
                model.config.grid()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            model,
        })
    }

    pub fn model(&self) -> &VisionTransformer<f32> {
        &self.model
    }
}

impl Teacher for BackboneTeacher {
    fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    fn forward(&self, images: &[Image]) -> Result<TokenBatch<f32>> {
        let size = self.model.config.image_size;
        if images.iter().all(|i| i.width == size && i.height == size) {
            self.model.forward(images)
        } else {
            let resized: Vec<Image> = images.iter().map(|i| i.resize(size, size)).collect();
            self.model.forward(&resized)
        }
    }

    fn param_checksum(&self) -> u64 {
        self.model.param_checksum()
    }
}

pub type Loader = Box<dyn Fn(&TeacherSpec) -> Result<Box<dyn Teacher>> + Send + Sync>;

/// Maps loader identifiers to constructors.
pub struct TeacherRegistry {
    loaders: BTreeMap<String, Loader>,
}

impl Default for TeacherRegistry {
    fn default() -> Self {
        let mut r = Self {
            loaders: BTreeMap::new(),
        };
        r.register("synthetic", Box::new(|s| Ok(Box::new(BackboneTeacher::synthetic(s)?))));
        r.register("checkpoint", Box::new(load_checkpoint_teacher));
        r
    }
}

impl TeacherRegistry {
    pub fn register(&mut self, id: &str, loader: Loader) {
        self.loaders.insert(id.to_string(), loader);
    }

    pub fn load(&self, spec: &TeacherSpec) -> Result<Box<dyn Teacher>> {
        spec.validate()?;
        let loader = self.loaders.get(&spec.loader).ok_or_else(|| {
            Error::TeacherUnavailable(format!("no loader `{}` registered for teacher `{}`", spec.loader, spec.name))
        })?;
        loader(spec)
    }

    pub fn load_all(&self, specs: &[TeacherSpec]) -> Result<Vec<Box<dyn Teacher>>> {
        specs.iter().map(|s| self.load(s)).collect()
    }
}

fn load_checkpoint_teacher(spec: &TeacherSpec) -> Result<Box<dyn Teacher>> {
    let path = spec
        .checkpoint
        .clone()
        .or_else(|| std::env::var_os(spec.env_var()).map(PathBuf::from))
        .ok_or_else(|| {
            Error::TeacherUnavailable(format!(
                "teacher `{}` has no checkpoint path (set `checkpoint` or {})",
                spec.name,
                spec.env_var()
            ))
        })?;
    let archive = Archive::load(&path).map_err(|e| Error::TeacherUnavailable(format!("{}: {e}", path.display())))?;
    let mut model = VisionTransformer::<f32>::restore(&archive, "backbone")?;
    model.config.mean = spec.mean;
    model.config.std = spec.std;
    Ok(Box::new(BackboneTeacher::from_model(spec, model)?))
}

/// Bilinear resize of a `[g_src², dim]` token grid to `[g_dst², dim]` with
/// pixel-center alignment.
pub fn resample_patch_grid<T: Scalar>(patches: &[T], g_src: usize, dim: usize, g_dst: usize) -> Result<Vec<T>> {
    if g_src == 0 || g_dst == 0 {
        return Err(Error::shape("patch grids must be at least 1×1"));
    }
    if patches.len() != g_src * g_src * dim {
        return Err(Error::shape(format!(
            "{} values do not form a {g_src}×{g_src}×{dim} grid",
            patches.len()
        )));
    }
    if g_src == g_dst {
        return Ok(patches.to_vec());
    }
    let scale = g_src as f64 / g_dst as f64;
    let taps: Vec<(usize, usize, T)> = (0..g_dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (g_src - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(g_src - 1), T::lit(s - i0 as f64))
        })
        .collect();
    let mut out = vec![T::zero(); g_dst * g_dst * dim];
    for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
            let at = |y: usize, x: usize| &patches[(y * g_src + x) * dim..(y * g_src + x + 1) * dim];
            let (a, b, c, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
            let dst = &mut out[(oy * g_dst + ox) * dim..(oy * g_dst + ox + 1) * dim];
            for j in 0..dim {
                let top = a[j] + (b[j] - a[j]) * fx;
                let bot = c[j] + (d[j] - c[j]) * fx;
                dst[j] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

/// Per-channel moments of a set of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub epsilon: f64,
}

impl<T: Scalar> StandardizationStats<T> {
    /// Population mean and std per channel over every row of `tokens`
    /// (`[rows, dim]`), i.e. pooled over batch and token positions.
    pub fn from_tokens(tokens: &[T], dim: usize) -> Self {
        let rows = tokens.len() / dim.max(1);
        let mut mean = vec![0.0f64; dim];
        for r in tokens.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.max(1) as f64);
        let mut var = vec![0.0f64; dim];
        for r in tokens.chunks_exact(dim) {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v.f64() - m).powi(2);
            }
        }
        Self {
            mean: mean.iter().map(|&m| T::lit(m)).collect(),
            std: var.iter().map(|&v| T::lit((v / rows.max(1) as f64).sqrt())).collect(),
            epsilon: STANDARDIZE_EPS,
        }
    }
}

/// `(x − mean) / (std + eps)` per channel.
pub fn standardize_patch_tokens<T: Scalar>(tokens: &[T], stats: &StandardizationStats<T>) -> Vec<T> {
    let dim = stats.mean.len();
    let eps = T::lit(stats.epsilon);
    let inv: Vec<T> = stats.std.iter().map(|&s| T::one() / (s + eps)).collect();
    let mut out = tokens.to_vec();
    for r in out.chunks_exact_mut(dim) {
        for j in 0..dim {
            r[j] = (r[j] - stats.mean[j]) * inv[j];
        }
    }
    out
}

/// Standardizes with statistics of the same token set.
pub fn standardize_batch<T: Scalar>(tokens: &[T], dim: usize) -> Vec<T> {
    standardize_patch_tokens(tokens, &StandardizationStats::from_tokens(tokens, dim))
}
