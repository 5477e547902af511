//! Dense layers with hand-written backward passes.
//!
//! Activations are row-major matrices stored in flat slices. Every layer
//! exposes a `forward` that optionally records what its `backward` needs,
//! and a `backward` that accumulates parameter gradients in place. The
//! code is generic over [`Scalar`] so the same graph runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating point element type of parameters and activations.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;
    const BYTES: usize;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `exp` for bulk activation math; may trade the last ulp for speed.
    #[inline(always)]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    /// Branch-free Cephes-style `expf`, written so loops over it vectorize.
    #[inline(always)]
    fn exp_fast(self) -> f32 {
        const MAGIC: f32 = 12_582_912.0; // 1.5 · 2^23, rounds to nearest
        let x = if self < -87.0 { -87.0 } else { self };
        let x = if x > 88.0 { 88.0 } else { x };
        let t = x * std::f32::consts::LOG2_E + MAGIC;
        let n = t - MAGIC;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4_f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5.000_000_1e-1;
        p = p * r * r + r + 1.0;
        let k = t.to_bits().wrapping_sub(MAGIC.to_bits()).wrapping_add(127);
        p * f32::from_bits(k << 23)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major GEMM with explicit leading dimensions.
///
/// Computes `C[m×n] = alpha · op(A) · op(B) + beta · C` where `op(A)` is
/// `m×k` and `op(B)` is `k×n`. With `trans_a`, `A` is stored `k×m`; with
/// `trans_b`, `B` is stored `n×k`. When `beta` is zero `C` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    lda: usize,
    trans_a: bool,
    b: &[T],
    ldb: usize,
    trans_b: bool,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "gemm: C out of bounds");
    if k == 0 {
        for r in 0..m {
            for v in &mut c[r * ldc..r * ldc + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let a_need = if trans_a { (k - 1) * lda + m } else { (m - 1) * lda + k };
    let b_need = if trans_b { (n - 1) * ldb + k } else { (k - 1) * ldb + n };
    assert!(a_need <= a.len(), "gemm: A out of bounds");
    assert!(b_need <= b.len(), "gemm: B out of bounds");
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: bounds checked above for every addressed element.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize], decay: bool) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
            decay,
        }
    }

    pub fn filled(shape: &[usize], v: T, decay: bool) -> Self {
        let mut p = Self::zeros(shape, decay);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn from_values(shape: &[usize], value: Vec<T>, decay: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            value,
            grad,
            shape: shape.to_vec(),
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Truncated normal init, resampling draws beyond two standard deviations.
    pub fn init_trunc_normal<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        for v in &mut self.value {
            let z = loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            *v = T::lit(z * std);
        }
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        for v in &mut self.value {
            *v = T::lit(rng.random_range(-bound..=bound));
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.iter().map(|v| U::lit(v.f64())).collect(),
            grad: self.grad.iter().map(|v| U::lit(v.f64())).collect(),
            shape: self.shape.clone(),
            decay: self.decay,
        }
    }
}

/// Named traversal over the parameters of a module.
pub trait Parameters<T: Scalar> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>));

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = Vec::new();
        self.visit_params("", &mut |n, p| v.push((n, p)));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        self.visit_params_mut("", &mut |n, p| v.push((n, p)));
        v
    }

    /// FNV-1a over parameter values in traversal order.
    fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        self.visit_params("", &mut |_, p| {
            for &v in &p.value {
                buf.clear();
                v.write_le(&mut buf);
                for &b in &buf {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine layer `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_dim, in_dim], true),
            bias: Param::zeros(&[out_dim], false),
        }
    }

    /// ViT-style init: truncated normal weights, zero bias.
    pub fn trunc_normal<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        l.weight.init_trunc_normal(std, rng);
        l
    }

    /// Uniform(±1/sqrt(in)) weights and bias.
    pub fn fan_in_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        l.weight.init_uniform(bound, rng);
        l.bias.init_uniform(bound, rng);
        l
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    /// `y[rows, out] = x[rows, in] Wᵀ + b`; `x` rows are `ldx` apart and only
    /// the first `in_dim` columns of each row are read.
    pub fn forward(&self, x: &[T], ldx: usize, rows: usize, y: &mut [T]) {
        let (i, o) = (self.in_dim(), self.out_dim());
        debug_assert!(y.len() >= rows * o);
        for r in 0..rows {
            y[r * o..(r + 1) * o].copy_from_slice(&self.bias.value);
        }
        gemm(rows, o, i, T::one(), x, ldx, false, &self.weight.value, i, true, T::one(), y, o);
    }

    /// Accumulates `dW += dyᵀ x`, `db += Σ dy`, and adds `dy W` into the first
    /// `in_dim` columns of `dx` (row stride `lddx`) when given.
    pub fn backward(&mut self, x: &[T], ldx: usize, rows: usize, dy: &[T], dx: Option<(&mut [T], usize)>) {
        let (i, o) = (self.in_dim(), self.out_dim());
        gemm(o, i, rows, T::one(), dy, o, true, x, ldx, false, T::one(), &mut self.weight.grad, i);
        for r in 0..rows {
            for (g, &d) in self.bias.grad.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        if let Some((dx, lddx)) = dx {
            gemm(rows, i, o, T::one(), dy, o, false, &self.weight.value, i, false, T::one(), dx, lddx);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            weight: Param::filled(&[dim], T::one(), false),
            bias: Param::zeros(&[dim], false),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, x: &[T], rows: usize, y: &mut [T], mut cache: Option<&mut LnCache<T>>) {
        let d = self.dim();
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(self.eps);
        if let Some(c) = cache.as_deref_mut() {
            c.xhat.resize(rows * d, T::zero());
            c.rstd.resize(rows, T::zero());
        }
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            let yr = &mut y[r * d..(r + 1) * d];
            for j in 0..d {
                let xh = (xr[j] - mean) * rstd;
                yr[j] = xh * self.weight.value[j] + self.bias.value[j];
            }
            if let Some(c) = cache.as_deref_mut() {
                c.rstd[r] = rstd;
                for j in 0..d {
                    c.xhat[r * d + j] = (xr[j] - mean) * rstd;
                }
            }
        }
    }

    /// Accumulates parameter gradients and adds the input gradient into `dx`.
    pub fn backward(&mut self, cache: &LnCache<T>, dy: &[T], dx: &mut [T]) {
        let d = self.dim();
        let rows = cache.rstd.len();
        let inv_d = T::lit(1.0 / d as f64);
        let mut g = vec![T::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for j in 0..d {
                self.weight.grad[j] += dyr[j] * xh[j];
                self.bias.grad[j] += dyr[j];
                g[j] = dyr[j] * self.weight.value[j];
                mean_g += g[j];
                mean_gx += g[j] * xh[j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            let rstd = cache.rstd[r];
            let dxr = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                dxr[j] += rstd * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            eps: self.eps,
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x · sigmoid(2u)` with
/// `u = sqrt(2/pi) · (x + 0.044715 x³)`.
pub fn gelu<T: Scalar>(x: &[T], y: &mut [T]) {
    let (c2, a) = (T::lit(2.0 * GELU_C), T::lit(GELU_A));
    for (yo, &v) in y.iter_mut().zip(x) {
        let e = (-(c2 * (v + a * v * v * v))).exp_fast();
        *yo = v / (T::one() + e);
    }
}

/// Multiplies `dy` in place by GELU'(x).
pub fn gelu_backward<T: Scalar>(x: &[T], dy: &mut [T]) {
    let (c2, a, three) = (T::lit(2.0 * GELU_C), T::lit(GELU_A), T::lit(3.0));
    for (g, &v) in dy.iter_mut().zip(x) {
        let s = T::one() / (T::one() + (-(c2 * (v + a * v * v * v))).exp_fast());
        let du2 = c2 * (T::one() + three * a * v * v);
        *g *= s + v * s * (T::one() - s) * du2;
    }
}

/// SiLU, `x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: &[T], y: &mut [T]) {
    for (yo, &v) in y.iter_mut().zip(x) {
        *yo = v / (T::one() + (-v).exp_fast());
    }
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(x) {
        let s = T::one() / (T::one() + (-v).exp_fast());
        *g *= s * (T::one() + v * (T::one() - s));
    }
}
