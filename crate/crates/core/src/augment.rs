//! Two-crop view generation and H&E stain augmentation.
//!
//! Each training tile yields one *aligned* crop shared by the student and
//! every teacher (so patch tokens correspond spatially) plus one
//! independent *non-aligned* crop per model. Every view then receives its
//! own stain perturbation and blur.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

pub const VIEW_SIZE: usize = 224;
pub const MIN_AREA_FRACTION: f64 = 0.25;
pub const MAX_AREA_FRACTION: f64 = 1.0;
pub const MIN_ASPECT: f64 = 0.9;
pub const MAX_ASPECT: f64 = 1.1;
const CROP_ATTEMPTS: usize = 10;

/// A crop rectangle in source pixels plus flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
    pub hflip: bool,
    pub vflip: bool,
}

impl CropSpec {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w: width,
            h: height,
            hflip: false,
            vflip: false,
        }
    }

    pub fn area_fraction(&self, width: u32, height: u32) -> f64 {
        (self.w as f64 * self.h as f64) / (width as f64 * height as f64)
    }

    /// Crop aspect relative to the source aspect.
    pub fn relative_aspect(&self, width: u32, height: u32) -> f64 {
        (self.w as f64 / self.h as f64) / (width as f64 / height as f64)
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }
}

/// Maps uniform draws to a crop. `u_x`, `u_y` in `[0, 1)` place the crop
/// among valid offsets. Returns `None` when the rounded extent violates
/// the area or aspect bounds or leaves the tile.
#[allow(clippy::too_many_arguments)]
pub fn crop_from_params(
    width: u32,
    height: u32,
    area_fraction: f64,
    aspect: f64,
    u_x: f64,
    u_y: f64,
    hflip: bool,
    vflip: bool,
) -> Option<CropSpec> {
    let (wf, hf) = (width as f64, height as f64);
    let area = area_fraction * wf * hf;
    let a = aspect * wf / hf;
    let w = (area * a).sqrt().round() as u32;
    let h = (area / a).sqrt().round() as u32;
    if w == 0 || h == 0 || w > width || h > height {
        return None;
    }
    let mut c = CropSpec {
        x0: 0,
        y0: 0,
        w,
        h,
        hflip,
        vflip,
    };
    let frac = c.area_fraction(width, height);
    let rel = c.relative_aspect(width, height);
    if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) || !(MIN_ASPECT..=MAX_ASPECT).contains(&rel) {
        return None;
    }
    c.x0 = ((u_x * (width - w + 1) as f64) as u32).min(width - w);
    c.y0 = ((u_y * (height - h + 1) as f64) as u32).min(height - h);
    Some(c)
}

/// Area fraction uniform in [0.25, 1], aspect uniform in [0.9, 1.1],
/// uniform placement, independent fair flips. Falls back to the full tile
/// after ten rejected draws.
pub fn sample_crop(width: u32, height: u32, rng: &mut Rng) -> CropSpec {
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    for _ in 0..CROP_ATTEMPTS {
        let area = rng.random_range(MIN_AREA_FRACTION..=MAX_AREA_FRACTION);
        let aspect = rng.random_range(MIN_ASPECT..=MAX_ASPECT);
        let (ux, uy) = (rng.random::<f64>(), rng.random::<f64>());
        if let Some(c) = crop_from_params(width, height, area, aspect, ux, uy, hflip, vflip) {
            return c;
        }
    }
    CropSpec {
        hflip,
        vflip,
        ..CropSpec::full(width, height)
    }
}

/// Crop, flip and bilinearly resize to `VIEW_SIZE × VIEW_SIZE`.
pub fn apply_spatial(tile: &Image, crop: &CropSpec) -> Result<Image> {
    if !crop.fits(tile.width as u32, tile.height as u32) {
        return Err(Error::InvalidCrop(format!(
            "{crop:?} outside {}x{} tile",
            tile.width, tile.height
        )));
    }
    let mut out = tile.crop_resize(
        crop.x0 as usize,
        crop.y0 as usize,
        crop.w as usize,
        crop.h as usize,
        VIEW_SIZE,
        VIEW_SIZE,
    );
    if crop.hflip {
        out.flip_horizontal();
    }
    if crop.vflip {
        out.flip_vertical();
    }
    Ok(out)
}

/// Stain and blur augmentation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualAugConfig {
    /// Per stain channel (H, E, D): concentration scale drawn from `[1-a, 1+a]`.
    pub hed_scale: [f32; 3],
    /// Per stain channel: additive concentration shift drawn from `[-b, b]`.
    pub hed_shift: [f32; 3],
    /// Gaussian blur sigma bounds in pixels.
    pub blur_sigma: [f32; 2],
    pub blur_probability: f32,
}

impl Default for VisualAugConfig {
    fn default() -> Self {
        Self {
            hed_scale: [0.05; 3],
            hed_shift: [0.02; 3],
            blur_sigma: [0.1, 2.0],
            blur_probability: 0.5,
        }
    }
}

impl VisualAugConfig {
    /// No stain change and no blur.
    pub fn none() -> Self {
        Self {
            hed_scale: [0.0; 3],
            hed_shift: [0.0; 3],
            blur_sigma: [0.1, 2.0],
            blur_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .hed_scale
            .iter()
            .chain(&self.hed_shift)
            .chain(&self.blur_sigma)
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::config("augmentation ranges must be finite and non-negative"));
        }
        if self.blur_sigma[0] > self.blur_sigma[1] || self.blur_sigma[0] <= 0.0 {
            return Err(Error::config("blur_sigma must satisfy 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return Err(Error::config("blur_probability must lie in [0, 1]"));
        }
        if self.hed_scale.iter().any(|&a| a >= 1.0) {
            return Err(Error::config("hed_scale must be below 1"));
        }
        Ok(())
    }
}

/// Ruifrok–Johnston stain vectors (rows: hematoxylin, eosin, DAB), unit length.
fn stain_matrix() -> [[f32; 3]; 3] {
    let raw = [[0.65f64, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];
    raw.map(|r| {
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        r.map(|v| (v / n) as f32)
    })
}

fn invert3(m: [[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let m = m.map(|r| r.map(|v| v as f64));
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    adj.map(|r| r.map(|v| (v / det) as f32))
}

/// Optical density above which a pixel counts as fully stained tissue.
/// Additive stain shifts fade out toward unstained background.
const TISSUE_OD: f32 = 0.15;
const MIN_INTENSITY: f32 = 1e-6;

/// Separate into H/E/D concentrations, rescale and shift them, recombine.
pub fn perturb_stains(img: &Image, scale: [f32; 3], shift: [f32; 3]) -> Image {
    let m = stain_matrix();
    let minv = invert3(m);
    let plane = img.width * img.height;
    let mut out = img.clone();
    for i in 0..plane {
        let od = [0, 1, 2].map(|c| -img.data[c * plane + i].max(MIN_INTENSITY).ln());
        let conc = [0, 1, 2].map(|s| od[0] * minv[0][s] + od[1] * minv[1][s] + od[2] * minv[2][s]);
        let tissue = ((od[0] + od[1] + od[2]) / (3.0 * TISSUE_OD)).clamp(0.0, 1.0);
        let adj = [0, 1, 2].map(|s| conc[s] * scale[s] + shift[s] * tissue);
        for c in 0..3 {
            let od_new = adj[0] * m[0][c] + adj[1] * m[1][c] + adj[2] * m[2][c];
            out.data[c * plane + i] = (-od_new).exp().clamp(0.0, 1.0);
        }
    }
    out
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-r..=r).map(|x| (-(x * x) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn reflect(i: i32, n: i32) -> usize {
    let p = 2 * (n - 1);
    let mut j = if p == 0 { 0 } else { i.rem_euclid(p) };
    if j >= n {
        j = p - j;
    }
    j as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i32;
    let (w, h) = (img.width, img.height);
    let mut tmp = Image::new(w, h);
    let mut out = Image::new(w, h);
    for c in 0..3 {
        let src = img.channel(c);
        let t = tmp.channel_mut(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * row[reflect(x as i32 + j as i32 - r, w as i32)];
                }
                t[y * w + x] = acc;
            }
        }
        let t = tmp.channel(c);
        let o = out.channel_mut(c);
        for y in 0..h {
            for (j, kv) in k.iter().enumerate() {
                let sy = reflect(y as i32 + j as i32 - r, h as i32);
                let (orow, trow) = (&mut o[y * w..(y + 1) * w], &t[sy * w..(sy + 1) * w]);
                for (ov, tv) in orow.iter_mut().zip(trow) {
                    *ov += kv * tv;
                }
            }
        }
    }
    out
}

/// Stain perturbation followed by optional blur, clamped to `[0, 1]`.
pub fn apply_visual(img: &Image, cfg: &VisualAugConfig, rng: &mut Rng) -> Image {
    let mut scale = [1.0f32; 3];
    let mut shift = [0.0f32; 3];
    for s in 0..3 {
        if cfg.hed_scale[s] > 0.0 {
            scale[s] = 1.0 + rng.random_range(-cfg.hed_scale[s]..=cfg.hed_scale[s]);
        }
        if cfg.hed_shift[s] > 0.0 {
            shift[s] = rng.random_range(-cfg.hed_shift[s]..=cfg.hed_shift[s]);
        }
    }
    let mut out = if scale == [1.0; 3] && shift == [0.0; 3] {
        img.clone()
    } else {
        perturb_stains(img, scale, shift)
    };
    if cfg.blur_probability > 0.0 && rng.random::<f32>() < cfg.blur_probability {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// Training views for one tile. Index 0 is the student, then teachers in order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub aligned: Vec<Image>,
    /// Empty when the non-aligned crop is disabled.
    pub nonaligned: Vec<Image>,
    pub aligned_crop: CropSpec,
    pub nonaligned_crops: Vec<CropSpec>,
}

impl ViewSet {
    pub fn models(&self) -> usize {
        self.aligned.len()
    }
}

const ALIGNED: u64 = 1;
const NONALIGNED: u64 = 2;

/// Views for the student and `n_teachers` teachers. All randomness derives
/// from one draw of `rng`, with an independent substream per view.
pub fn make_views(tile: &Image, n_teachers: usize, cfg: &VisualAugConfig, with_nonaligned: bool, rng: &mut Rng) -> Result<ViewSet> {
    if tile.width < VIEW_SIZE || tile.height < VIEW_SIZE {
        return Err(Error::InvalidSize {
            size: tile.width.min(tile.height) as u32,
            min: VIEW_SIZE as u32,
        });
    }
    let base: u64 = rng.random();
    let (tw, th) = (tile.width as u32, tile.height as u32);
    let models = 1 + n_teachers;

    let aligned_crop = sample_crop(tw, th, &mut rng::stream(base, &[ALIGNED]));
    let spatial = apply_spatial(tile, &aligned_crop)?;
    let aligned = (0..models)
        .map(|m| apply_visual(&spatial, cfg, &mut rng::stream(base, &[ALIGNED, m as u64 + 1])))
        .collect();

    let mut nonaligned = Vec::new();
    let mut nonaligned_crops = Vec::new();
    if with_nonaligned {
        for m in 0..models {
            let crop = sample_crop(tw, th, &mut rng::stream(base, &[NONALIGNED, m as u64]));
            let view = apply_spatial(tile, &crop)?;
            nonaligned.push(apply_visual(&view, cfg, &mut rng::stream(base, &[NONALIGNED, m as u64, 1])));
            nonaligned_crops.push(crop);
        }
    }
    Ok(ViewSet {
        aligned,
        nonaligned,
        aligned_crop,
        nonaligned_crops,
    })
}

pub fn make_training_views(tile: &Image, n_teachers: usize, cfg: &VisualAugConfig, rng: &mut Rng) -> Result<ViewSet> {
    make_views(tile, n_teachers, cfg, true, rng)
}
