//! Planar float images and the resampling primitives shared by augmentation
//! and evaluation preprocessing.

use image::RgbImage;

/// An RGB image stored channel-planar (`[3, H, W]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..3 {
            img.channel_mut(c).iter_mut().for_each(|v| *v = rgb[c]);
        }
        img
    }

    pub fn from_rgb8(src: &RgbImage) -> Self {
        let (w, h) = (src.width() as usize, src.height() as usize);
        let mut img = Self::new(w, h);
        let plane = w * h;
        for (i, px) in src.pixels().enumerate() {
            for c in 0..3 {
                img.data[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        img
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let plane = self.width * self.height;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |c: usize| (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.width * self.height;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    /// FNV-1a over the raw float bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Bilinear resample of the region `[x0, x0+w) × [y0, y0+h)` onto an
    /// `out_w × out_h` grid using pixel-center alignment. Samples are clamped
    /// to the region, so a same-size region reproduces its pixels exactly.
    pub fn crop_resize(&self, x0: usize, y0: usize, w: usize, h: usize, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::new(out_w, out_h);
        let sx = w as f64 / out_w as f64;
        let sy = h as f64 / out_h as f64;
        let taps = |o: usize, scale: f64, start: usize, len: usize| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let f = (s - i0 as f64) as f32;
            (start + i0, start + i1, f)
        };
        let xs: Vec<_> = (0..out_w).map(|o| taps(o, sx, x0, w)).collect();
        let ys: Vec<_> = (0..out_h).map(|o| taps(o, sy, y0, h)).collect();
        for c in 0..3 {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for (oy, &(ya, yb, fy)) in ys.iter().enumerate() {
                let ra = &src[ya * self.width..(ya + 1) * self.width];
                let rb = &src[yb * self.width..(yb + 1) * self.width];
                for (ox, &(xa, xb, fx)) in xs.iter().enumerate() {
                    let top = if fx == 0.0 { ra[xa] } else { ra[xa] + (ra[xb] - ra[xa]) * fx };
                    let bot = if fx == 0.0 { rb[xa] } else { rb[xa] + (rb[xb] - rb[xa]) * fx };
                    dst[oy * out_w + ox] = if fy == 0.0 { top } else { top + (bot - top) * fy };
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        self.crop_resize(0, 0, self.width, self.height, out_w, out_h)
    }

    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for row in self.data.chunks_mut(w) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (w, h) = (self.width, self.height);
        for c in 0..3 {
            let plane = self.channel_mut(c);
            for y in 0..h / 2 {
                let (a, b) = plane.split_at_mut((h - 1 - y) * w);
                a[y * w..(y + 1) * w].swap_with_slice(&mut b[..w]);
            }
        }
    }

    /// Resize the shorter side to `size` and take the centered `size × size` crop.
    pub fn resize_center_crop(&self, size: usize) -> Image {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let short = self.width.min(self.height) as f64;
        let scale = size as f64 / short;
        let rw = ((self.width as f64 * scale).round() as usize).max(size);
        let rh = ((self.height as f64 * scale).round() as usize).max(size);
        let resized = self.resize(rw, rh);
        let x0 = (rw - size) / 2;
        let y0 = (rh - size) / 2;
        resized.crop_resize(x0, y0, size, size, size, size)
    }
}
