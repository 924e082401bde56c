//! Complex 2D grids, centered orthonormal Fourier transforms and the seeded
//! random stream every generator in the crate draws from.
//!
//! Storage is row-major (`row * width + col`). The Fourier pair is unitary:
//! `fft2c = fftshift ∘ DFT ∘ ifftshift` scaled by `1/sqrt(H·W)`, which puts the
//! DC bin at `(H/2, W/2)` (integer division).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);

/// Smallest supported grid edge.
pub const MIN_EDGE: usize = 8;

/// Anything stored as a flat complex buffer with a known shape.
pub trait ComplexArray {
    fn values(&self) -> &[C64];
    fn dims(&self) -> Vec<usize>;

    fn norm_sqr(&self) -> f64 {
        self.values().iter().map(|v| v.norm_sqr()).sum()
    }

    fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Single complex image, `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<C64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_edges(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![ZERO; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        check_edges(height, width)?;
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_real(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(height, width, data.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: C64) {
        self.data[row * self.width + col] = v;
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn scaled(&self, a: C64) -> Self {
        self.map(|v| v * a)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a·self + b·other`
    pub fn lincomb(&self, a: C64, other: &Self, b: C64) -> Result<Self> {
        same_shape(self.shape(), other.shape())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.lincomb(C64::new(1.0, 0.0), other, C64::new(-1.0, 0.0))
    }
}

impl ComplexArray for ComplexImage {
    fn values(&self) -> &[C64] {
        &self.data
    }

    fn dims(&self) -> Vec<usize> {
        vec![self.height, self.width]
    }
}

/// Stack of per-coil images sharing one grid, coil-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilImage {
    n_coils: usize,
    height: usize,
    width: usize,
    data: Vec<C64>,
}

impl MultiCoilImage {
    pub fn zeros(n_coils: usize, height: usize, width: usize) -> Result<Self> {
        check_edges(height, width)?;
        if n_coils == 0 {
            return Err(Error::invalid("at least one coil is required"));
        }
        Ok(Self {
            n_coils,
            height,
            width,
            data: vec![ZERO; n_coils * height * width],
        })
    }

    pub fn from_vec(n_coils: usize, height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        let mut out = Self::zeros(n_coils, height, width)?;
        if data.len() != out.data.len() {
            return Err(Error::shape(format!(
                "{} values for {n_coils} coils of {height}x{width}",
                data.len()
            )));
        }
        out.data = data;
        Ok(out)
    }

    pub fn from_coils(coils: &[ComplexImage]) -> Result<Self> {
        let first = coils
            .first()
            .ok_or_else(|| Error::invalid("at least one coil is required"))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(coils.len() * h * w);
        for c in coils {
            same_shape((h, w), c.shape())?;
            data.extend_from_slice(c.data());
        }
        Self::from_vec(coils.len(), h, w, data)
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_coils, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn coil(&self, k: usize) -> &[C64] {
        let n = self.plane_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn coil_mut(&mut self, k: usize) -> &mut [C64] {
        let n = self.plane_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn coil_image(&self, k: usize) -> ComplexImage {
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.coil(k).to_vec(),
        }
    }

    pub fn coils(&self) -> impl Iterator<Item = &[C64]> {
        self.data.chunks(self.plane_len())
    }

    pub fn coils_mut(&mut self) -> impl Iterator<Item = &mut [C64]> {
        let n = self.plane_len();
        self.data.chunks_mut(n)
    }

    /// `a·self + b·other`
    pub fn lincomb(&self, a: C64, other: &Self, b: C64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = self.clone();
        for (o, &y) in out.data.iter_mut().zip(&other.data) {
            *o = a * *o + b * y;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.lincomb(C64::new(1.0, 0.0), other, C64::new(-1.0, 0.0))
    }
}

impl ComplexArray for MultiCoilImage {
    fn values(&self) -> &[C64] {
        &self.data
    }

    fn dims(&self) -> Vec<usize> {
        vec![self.n_coils, self.height, self.width]
    }
}

fn check_edges(height: usize, width: usize) -> Result<()> {
    if height < MIN_EDGE || width < MIN_EDGE {
        return Err(Error::invalid(format!(
            "grid {height}x{width} is smaller than the {MIN_EDGE}x{MIN_EDGE} minimum"
        )));
    }
    Ok(())
}

pub(crate) fn same_shape<T: PartialEq + std::fmt::Debug>(a: T, b: T) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Sum over all entries of `a · conj(b)`.
pub fn inner<A: ComplexArray + ?Sized>(a: &A, b: &A) -> Result<C64> {
    let (da, db) = (a.dims(), b.dims());
    if da != db {
        return Err(Error::shape(format!("inner product of {da:?} and {db:?}")));
    }
    Ok(inner_slices(a.values(), b.values()))
}

pub(crate) fn inner_slices(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).fold(ZERO, |acc, (&x, &y)| acc + x * y.conj())
}

/// Real part of `inner`, i.e. the real inner product of the underlying
/// (re, im) vectors.
pub(crate) fn real_inner(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, forward))
            .or_insert_with(|| {
                let dir = if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

/// Centered orthonormal 2D DFT of a row-major `height × width` buffer, in place.
pub fn fft2c_inplace(data: &mut [C64], height: usize, width: usize) {
    centered_dft(data, height, width, true);
}

/// Inverse of [`fft2c_inplace`].
pub fn ifft2c_inplace(data: &mut [C64], height: usize, width: usize) {
    centered_dft(data, height, width, false);
}

fn centered_dft(data: &mut [C64], height: usize, width: usize, forward: bool) {
    debug_assert_eq!(data.len(), height * width);
    let row_plan = plan(width, forward);
    let col_plan = plan(height, forward);
    let scale = 1.0 / ((height * width) as f64).sqrt();
    let (hh, hw) = (height / 2, width / 2);

    // ifftshift on the way in: buf[r][c] = data[(r + H/2) % H][(c + W/2) % W]
    let mut buf = vec![ZERO; height * width];
    for r in 0..height {
        let src = ((r + hh) % height) * width;
        let dst = &mut buf[r * width..(r + 1) * width];
        dst[..width - hw].copy_from_slice(&data[src + hw..src + width]);
        dst[width - hw..].copy_from_slice(&data[src..src + hw]);
    }

    let mut scratch = vec![ZERO; row_plan.get_inplace_scratch_len().max(col_plan.get_inplace_scratch_len())];
    row_plan.process_with_scratch(&mut buf, &mut scratch);

    let mut col = vec![ZERO; height];
    for c in 0..width {
        for r in 0..height {
            col[r] = buf[r * width + c];
        }
        col_plan.process_with_scratch(&mut col, &mut scratch);
        for r in 0..height {
            buf[r * width + c] = col[r];
        }
    }

    // fftshift on the way out: data[r][c] = buf[(r - H/2) mod H][(c - W/2) mod W]
    for r in 0..height {
        let src = ((r + height - hh) % height) * width;
        let dst = &mut data[r * width..(r + 1) * width];
        let split = width - hw;
        dst[hw..].copy_from_slice(&buf[src..src + split]);
        dst[..hw].copy_from_slice(&buf[src + split..src + width]);
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
}

pub fn fft2c(img: &ComplexImage) -> ComplexImage {
    let mut out = img.clone();
    fft2c_inplace(&mut out.data, img.height, img.width);
    out
}

pub fn ifft2c(ksp: &ComplexImage) -> ComplexImage {
    let mut out = ksp.clone();
    ifft2c_inplace(&mut out.data, ksp.height, ksp.width);
    out
}

/// Per-coil centered FFT.
pub fn fft2c_coils(c: &MultiCoilImage) -> MultiCoilImage {
    let mut out = c.clone();
    let (h, w) = (c.height, c.width);
    for plane in out.coils_mut() {
        fft2c_inplace(plane, h, w);
    }
    out
}

/// Per-coil centered inverse FFT.
pub fn ifft2c_coils(c: &MultiCoilImage) -> MultiCoilImage {
    let mut out = c.clone();
    let (h, w) = (c.height, c.width);
    for plane in out.coils_mut() {
        ifft2c_inplace(plane, h, w);
    }
    out
}

/// Deterministic random stream.
///
/// The generator is ChaCha with 8 rounds keyed by the seed's 8 little-endian
/// bytes followed by 24 zero bytes (stream 0, counter 0). Derived draws:
///
/// * `uniform`: `(next_u64 >> 11) · 2⁻⁵³` in `[0, 1)`
/// * `standard_normal`: Box-Muller on `u1 = 1 − uniform`, `u2 = uniform`,
///   producing `sqrt(−2 ln u1)·cos(2π u2)` then `…·sin(2π u2)` on the next call
/// * `complex_normal`: one Box-Muller pair scaled by `1/√2`, so each part is
///   `N(0, ½)` and `E|z|² = 1`
/// * `below(n)`: Lemire multiply-and-reject on `next_u64`
#[derive(Clone, Debug)]
pub struct RandomStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

pub fn seeded_rng(seed: u64) -> RandomStream {
    RandomStream::new(seed)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            rng: ChaCha8Rng::from_seed(key),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        (r * t.cos(), r * t.sin())
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (a, b) = self.box_muller();
        self.spare = Some(b);
        a
    }

    pub fn complex_normal(&mut self) -> C64 {
        let (a, b) = self.box_muller();
        C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = self.next_u64() as u128 * n as u128;
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Seeded Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn complex_image(&mut self, height: usize, width: usize) -> Result<ComplexImage> {
        let data = (0..height * width).map(|_| self.complex_normal()).collect();
        ComplexImage::from_vec(height, width, data)
    }

    pub fn multicoil(&mut self, n_coils: usize, height: usize, width: usize) -> Result<MultiCoilImage> {
        let data = (0..n_coils * height * width)
            .map(|_| self.complex_normal())
            .collect();
        MultiCoilImage::from_vec(n_coils, height, width, data)
    }
}
