//! Synthetic acquisition: phantoms, coil maps, Cartesian masks, noisy
//! multi-coil k-space and paired measurements of the same object.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::csm::{rss_normalize, CoilSensitivities};
use crate::error::{Error, Result};
use crate::numerics::{fft2c, ComplexImage, MultiCoilImage, RandomStream, C64, ZERO};
use crate::operators::{forward, ForwardModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    SmoothRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Equispaced,
    Random,
    /// Calibration block only (what `extract_acs` leaves behind).
    AcsOnly,
}

/// Phase-encode row selector. Readout (columns) is always fully sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    kind: MaskKind,
    accel: f64,
    offset: usize,
    acs_start: usize,
    acs_count: usize,
    lines: Vec<usize>,
}

impl SamplingMask {
    /// Build from an explicit line list. The ACS block must be a subset.
    pub fn from_lines(
        height: usize,
        width: usize,
        kind: MaskKind,
        accel: f64,
        offset: usize,
        acs_start: usize,
        acs_count: usize,
        mut lines: Vec<usize>,
    ) -> Result<Self> {
        lines.sort_unstable();
        lines.dedup();
        if lines.is_empty() {
            return Err(Error::invalid("mask selects no lines"));
        }
        if lines.iter().any(|&l| l >= height) {
            return Err(Error::invalid("mask line outside the grid"));
        }
        if acs_start + acs_count > height {
            return Err(Error::invalid("ACS block outside the grid"));
        }
        if (acs_start..acs_start + acs_count).any(|l| lines.binary_search(&l).is_err()) {
            return Err(Error::invalid("ACS lines must be a subset of the selected lines"));
        }
        Ok(Self {
            height,
            width,
            kind,
            accel,
            offset,
            acs_start,
            acs_count,
            lines,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            kind: MaskKind::Equispaced,
            accel: 1.0,
            offset: 0,
            acs_start: 0,
            acs_count: height,
            lines: (0..height).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    /// Spacing of the regular lattice (`round(R)`).
    pub fn step(&self) -> usize {
        (self.accel.round() as usize).max(1)
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn selected_lines(&self) -> &[usize] {
        &self.lines
    }

    pub fn acs_lines(&self) -> std::ops::Range<usize> {
        self.acs_start..self.acs_start + self.acs_count
    }

    pub fn acs_count(&self) -> usize {
        self.acs_count
    }

    pub fn is_selected(&self, row: usize) -> bool {
        self.lines.binary_search(&row).is_ok()
    }

    /// Per-row indicator, length `height`.
    pub fn row_indicator(&self) -> Vec<bool> {
        let mut rows = vec![false; self.height];
        for &l in &self.lines {
            rows[l] = true;
        }
        rows
    }

    pub fn sampling_rate(&self) -> f64 {
        self.lines.len() as f64 / self.height as f64
    }

    pub fn acs_only(&self) -> Result<Self> {
        if self.acs_count == 0 {
            return Err(Error::MissingAcs);
        }
        Ok(Self {
            kind: MaskKind::AcsOnly,
            lines: self.acs_lines().collect(),
            ..self.clone()
        })
    }

    /// Zero every row the mask does not select, in each coil plane.
    pub fn apply(&self, planes: &mut MultiCoilImage) {
        let rows = self.row_indicator();
        let w = self.width;
        for plane in planes.coils_mut() {
            for (r, row) in plane.chunks_mut(w).enumerate() {
                if !rows[r] {
                    row.fill(ZERO);
                }
            }
        }
    }
}

/// Undersampled multi-coil k-space. Rows outside the mask are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilKspace {
    data: MultiCoilImage,
    mask: SamplingMask,
    noise_sigma: f64,
}

impl MultiCoilKspace {
    /// Wrap `data`, zeroing whatever lies outside the mask.
    pub fn masked(mut data: MultiCoilImage, mask: SamplingMask, noise_sigma: f64) -> Result<Self> {
        if (data.height(), data.width()) != (mask.height(), mask.width()) {
            return Err(Error::shape(format!(
                "k-space {}x{} vs mask {}x{}",
                data.height(),
                data.width(),
                mask.height(),
                mask.width()
            )));
        }
        mask.apply(&mut data);
        Ok(Self {
            data,
            mask,
            noise_sigma,
        })
    }

    pub fn data(&self) -> &MultiCoilImage {
        &self.data
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn n_coils(&self) -> usize {
        self.data.n_coils()
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn into_parts(self) -> (MultiCoilImage, SamplingMask, f64) {
        (self.data, self.mask, self.noise_sigma)
    }
}

/// Two measurements of one object. Ground truth and true maps are held for
/// evaluation; every read through the public accessors is counted so tests
/// can prove training never touches them.
#[derive(Debug)]
pub struct TrainingPair {
    pub y: MultiCoilKspace,
    pub y_prime: MultiCoilKspace,
    ground_truth: Option<ComplexImage>,
    true_csm: Option<CoilSensitivities>,
    reference_reads: AtomicUsize,
}

impl Clone for TrainingPair {
    fn clone(&self) -> Self {
        Self {
            y: self.y.clone(),
            y_prime: self.y_prime.clone(),
            ground_truth: self.ground_truth.clone(),
            true_csm: self.true_csm.clone(),
            reference_reads: AtomicUsize::new(self.reference_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for TrainingPair {
    fn eq(&self, other: &Self) -> bool {
        self.y == other.y
            && self.y_prime == other.y_prime
            && self.ground_truth == other.ground_truth
            && self.true_csm == other.true_csm
    }
}

impl TrainingPair {
    pub fn new(
        y: MultiCoilKspace,
        y_prime: MultiCoilKspace,
        ground_truth: Option<ComplexImage>,
        true_csm: Option<CoilSensitivities>,
    ) -> Result<Self> {
        if y.data.shape() != y_prime.data.shape() {
            return Err(Error::shape(format!(
                "pair members {:?} vs {:?}",
                y.data.shape(),
                y_prime.data.shape()
            )));
        }
        Ok(Self {
            y,
            y_prime,
            ground_truth,
            true_csm,
            reference_reads: AtomicUsize::new(0),
        })
    }

    /// Evaluation-only reference image.
    pub fn ground_truth(&self) -> Option<&ComplexImage> {
        self.reference_reads.fetch_add(1, Ordering::Relaxed);
        self.ground_truth.as_ref()
    }

    /// Evaluation-only reference coil maps.
    pub fn true_csm(&self) -> Option<&CoilSensitivities> {
        self.reference_reads.fetch_add(1, Ordering::Relaxed);
        self.true_csm.as_ref()
    }

    pub fn reference_reads(&self) -> usize {
        self.reference_reads.load(Ordering::Relaxed)
    }

    pub fn reset_reference_reads(&self) {
        self.reference_reads.store(0, Ordering::Relaxed);
    }

    /// Uncounted access for persistence.
    pub(crate) fn references(&self) -> (Option<&ComplexImage>, Option<&CoilSensitivities>) {
        (self.ground_truth.as_ref(), self.true_csm.as_ref())
    }

    /// Same pair with the two measurements exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            y: self.y_prime.clone(),
            y_prime: self.y.clone(),
            ..self.clone()
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.y.data.shape()
    }
}

struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

// Modified Shepp-Logan intensities, except the two ventricles are -0.08
// instead of -0.2 so every pixel inside the skull stays above 10% of max.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { intensity: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { intensity: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { intensity: -0.08, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { intensity: -0.08, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { intensity: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

/// Normalized coordinates in [-1, 1): x grows with column, y grows upward.
fn grid_coords(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let x = (col as f64 - width as f64 / 2.0) / (width as f64 / 2.0);
    let y = (height as f64 / 2.0 - row as f64) / (height as f64 / 2.0);
    (x, y)
}

fn inside(e: &Ellipse, x: f64, y: f64) -> bool {
    let t = e.phi_deg.to_radians();
    let (dx, dy) = (x - e.x0, y - e.y0);
    let u = dx * t.cos() + dy * t.sin();
    let v = -dx * t.sin() + dy * t.cos();
    (u / e.a).powi(2) + (v / e.b).powi(2) <= 1.0
}

pub fn make_phantom(height: usize, width: usize, seed: u64, kind: PhantomKind) -> Result<ComplexImage> {
    match kind {
        PhantomKind::SheppLogan => {
            if height < 32 || width < 32 {
                return Err(Error::invalid(format!(
                    "shepp_logan needs at least 32x32, got {height}x{width}"
                )));
            }
            let mut data = Vec::with_capacity(height * width);
            for r in 0..height {
                for c in 0..width {
                    let (x, y) = grid_coords(r, c, height, width);
                    let v: f64 = SHEPP_LOGAN
                        .iter()
                        .filter(|e| inside(e, x, y))
                        .map(|e| e.intensity)
                        .sum();
                    data.push(C64::new(v.clamp(0.0, 1.0), 0.0));
                }
            }
            ComplexImage::from_vec(height, width, data)
        }
        PhantomKind::SmoothRandom => smooth_random(height, width, seed),
    }
}

/// Elliptical support with a sharp edge, a smooth bump field inside and a
/// random linear phase ramp. Magnitude is scaled to max 1 and floored at
/// 0.15 inside the support.
fn smooth_random(height: usize, width: usize, seed: u64) -> Result<ComplexImage> {
    let mut rng = RandomStream::new(seed);
    let support = Ellipse {
        intensity: 1.0,
        a: rng.uniform_range(0.6, 0.85),
        b: rng.uniform_range(0.7, 0.9),
        x0: rng.uniform_range(-0.05, 0.05),
        y0: rng.uniform_range(-0.05, 0.05),
        phi_deg: rng.uniform_range(-15.0, 15.0),
    };
    let base = rng.uniform_range(0.3, 0.5);
    let n_bumps = 4 + rng.below(5) as usize;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                rng.uniform_range(-0.3, 0.7),
                rng.uniform_range(-0.6, 0.6),
                rng.uniform_range(-0.7, 0.7),
                rng.uniform_range(0.06, 0.25),
            )
        })
        .collect();
    let ramp = (
        rng.uniform_range(-PI, PI),
        rng.uniform_range(-PI / 2.0, PI / 2.0),
        rng.uniform_range(-PI / 2.0, PI / 2.0),
    );

    let mut mag = vec![0.0; height * width];
    let mut inside_mask = vec![false; height * width];
    for r in 0..height {
        for c in 0..width {
            let (x, y) = grid_coords(r, c, height, width);
            if !inside(&support, x, y) {
                continue;
            }
            let bump: f64 = bumps
                .iter()
                .map(|&(amp, bx, by, s)| amp * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            mag[r * width + c] = (base + bump).max(0.0);
            inside_mask[r * width + c] = true;
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::invalid("phantom support is empty"));
    }
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let m = if inside_mask[i] { (mag[i] / peak).max(0.15) } else { 0.0 };
            let (x, y) = grid_coords(r, c, height, width);
            let phase = ramp.0 + ramp.1 * x + ramp.2 * y;
            data.push(C64::from_polar(m.min(1.0), phase));
        }
    }
    ComplexImage::from_vec(height, width, data)
}

/// Coils on a ring around the FOV: Gaussian envelope of width
/// `0.6·max(H, W)` times a random first-order complex polynomial and a smooth
/// phase, RSS-normalized over the whole grid.
pub fn make_coil_maps(n_coils: usize, height: usize, width: usize, seed: u64) -> Result<CoilSensitivities> {
    if !(2..=32).contains(&n_coils) {
        return Err(Error::invalid(format!("n_c must lie in [2, 32], got {n_coils}")));
    }
    let mut rng = RandomStream::new(seed);
    let sigma = 0.6 * height.max(width) as f64;
    let mut maps = MultiCoilImage::zeros(n_coils, height, width)?;
    let jitter = rng.uniform_range(0.0, 2.0 * PI / n_coils as f64);
    for k in 0..n_coils {
        let angle = jitter + 2.0 * PI * k as f64 / n_coils as f64;
        let radius = rng.uniform_range(0.55, 0.7);
        let cy = height as f64 / 2.0 - radius * height as f64 * angle.sin();
        let cx = width as f64 / 2.0 + radius * width as f64 * angle.cos();
        let p1 = C64::new(rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3));
        let p2 = C64::new(rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3));
        let phase0 = rng.uniform_range(-PI, PI);
        let phase_x = rng.uniform_range(-1.0, 1.0);
        let phase_y = rng.uniform_range(-1.0, 1.0);
        let plane = maps.coil_mut(k);
        for r in 0..height {
            for c in 0..width {
                let (x, y) = grid_coords(r, c, height, width);
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                let env = (-d2 / (2.0 * sigma * sigma)).exp();
                let poly = C64::new(1.0, 0.0) + p1 * x + p2 * y;
                let phase = C64::from_polar(1.0, phase0 + phase_x * x + phase_y * y);
                plane[r * width + c] = poly * phase * env;
            }
        }
    }
    rss_normalize(maps, vec![true; height * width])
}

/// Equispaced (or budget-matched random) phase-encode mask with a centered
/// ACS block of `acs_count` lines starting at `H/2 − acs_count/2`.
pub fn make_mask(
    height: usize,
    width: usize,
    accel: f64,
    acs_count: usize,
    kind: MaskKind,
    seed: u64,
    offset: usize,
) -> Result<SamplingMask> {
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(Error::invalid(format!("acceleration must be >= 1, got {accel}")));
    }
    if acs_count > height {
        return Err(Error::invalid(format!(
            "{acs_count} ACS lines exceed the {height} available"
        )));
    }
    let step = (accel.round() as usize).max(1);
    if offset >= step {
        return Err(Error::invalid(format!("offset {offset} must be below round(R) = {step}")));
    }
    let acs_start = height / 2 - acs_count / 2;
    let acs = acs_start..acs_start + acs_count;
    let mut lines: Vec<usize> = (offset..height).step_by(step).collect();
    lines.extend(acs.clone());
    lines.sort_unstable();
    lines.dedup();
    let lines = match kind {
        MaskKind::Equispaced => lines,
        MaskKind::Random => {
            let budget = lines.len();
            let mut rng = RandomStream::new(seed);
            let mut pool: Vec<usize> = (0..height).filter(|l| !acs.contains(l)).collect();
            let extra = budget - acs_count;
            // partial Fisher-Yates: the first `extra` slots become the draw
            for i in 0..extra.min(pool.len()) {
                let j = i + rng.below((pool.len() - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut chosen: Vec<usize> = pool[..extra.min(pool.len())].to_vec();
            chosen.extend(acs.clone());
            chosen
        }
        MaskKind::AcsOnly => return Err(Error::invalid("AcsOnly masks come from extract_acs")),
    };
    SamplingMask::from_lines(height, width, kind, accel, offset, acs_start, acs_count, lines)
}

/// `0.01 · max |fft2c(x)|`
pub fn default_noise_sigma(x: &ComplexImage) -> f64 {
    0.01 * fft2c(x).data().iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Per coil `mask ⊙ (fft2c(S_k ⊙ x) + e_k)`, `e_k` i.i.d. complex Gaussian
/// with `E|e|² = σ²`. Noise is drawn for every grid sample, coil-major and
/// row-major, before masking.
pub fn simulate_kspace(
    x: &ComplexImage,
    csm: &CoilSensitivities,
    mask: &SamplingMask,
    noise_sigma: f64,
    rng: &mut RandomStream,
) -> Result<MultiCoilKspace> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    let model = ForwardModel::new(csm.clone(), mask.clone())?;
    let clean = forward(x, &model)?;
    if noise_sigma == 0.0 {
        return Ok(clean);
    }
    let (mut data, mask, _) = clean.into_parts();
    for v in data.data_mut() {
        *v += rng.complex_normal() * noise_sigma;
    }
    MultiCoilKspace::masked(data, mask, noise_sigma)
}

/// Two equispaced acquisitions with offsets `o` and `(o + ⌊R/2⌋) mod R`
/// sharing one ACS block, each with its own noise draw. `o` is drawn from
/// the seed.
pub fn make_training_pair(
    x: &ComplexImage,
    csm: &CoilSensitivities,
    accel: f64,
    acs_count: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<TrainingPair> {
    let (h, w) = x.shape();
    let mut rng = RandomStream::new(seed);
    let step = (accel.round() as usize).max(1);
    let offset = rng.below(step as u64) as usize;
    let offset_prime = (offset + step / 2) % step;
    let mask = make_mask(h, w, accel, acs_count, MaskKind::Equispaced, seed, offset)?;
    let mask_prime = make_mask(h, w, accel, acs_count, MaskKind::Equispaced, seed, offset_prime)?;
    let y = simulate_kspace(x, csm, &mask, noise_sigma, &mut rng)?;
    let y_prime = simulate_kspace(x, csm, &mask_prime, noise_sigma, &mut rng)?;
    TrainingPair::new(y, y_prime, Some(x.clone()), Some(csm.clone()))
}
