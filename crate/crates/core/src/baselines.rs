//! Classical reconstructions: zero filling, total-variation regularized
//! least squares, and GRAPPA k-space interpolation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::acquisition::{MaskKind, MultiCoilKspace};
use crate::csm::{rss, CoilSensitivities};
use crate::error::{Error, Result};
use crate::numerics::{ifft2c_coils, ComplexImage, MultiCoilImage, RandomStream, C64, ZERO};
use crate::operators::{combine_raw, dc_gradient, dc_objective, expand_raw};

/// With maps: `Σ conj(S_k) F⁻¹ y_k`. Without: the RSS magnitude of the
/// per-coil zero-filled images.
pub fn zero_filled_recon(y: &MultiCoilKspace, csm: Option<&CoilSensitivities>) -> Result<ComplexImage> {
    let coils = ifft2c_coils(y.data());
    let (h, w) = (y.height(), y.width());
    match csm {
        Some(s) => ComplexImage::from_vec(h, w, combine_raw(&coils, s.maps())?),
        None => ComplexImage::from_real(h, w, &rss(&coils)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    /// Weight of the TV term.
    pub tau: f64,
    pub outer_iters: usize,
    pub step: f64,
    /// Dual iterations per proximal step (warm-started across steps).
    pub prox_iters: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            outer_iters: 100,
            step: 1.0,
            prox_iters: 20,
        }
    }
}

impl TvConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.step > 0.0 && self.tau.is_finite() && self.step.is_finite()) {
            return Err(Error::invalid("TV weight and step must be positive"));
        }
        if self.outer_iters == 0 || self.prox_iters == 0 {
            return Err(Error::invalid("TV iteration counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TvOutcome {
    pub image: ComplexImage,
    /// `f(x)` at the start and after every outer iteration.
    pub objective: Vec<f64>,
    /// Estimated Lipschitz constant of the data-term gradient.
    pub lipschitz: f64,
    pub warnings: Vec<String>,
}

pub fn tv_reconstruct(y: &MultiCoilKspace, csm: &CoilSensitivities, cfg: &TvConfig) -> Result<ComplexImage> {
    tv_reconstruct_with_history(y, csm, cfg).map(|o| o.image)
}

/// Proximal gradient on `½‖Ax − y‖² + τ‖Dx‖₁` (anisotropic, complex
/// modulus, forward differences without wraparound), started from the
/// zero-filled combine.
///
/// The inner dual solve is inexact, so each step is checked: if the
/// objective would rise, the dual iterations continue (up to 10× the budget)
/// and, failing that, the step is rejected. The history is therefore
/// non-increasing by construction.
pub fn tv_reconstruct_with_history(y: &MultiCoilKspace, csm: &CoilSensitivities, cfg: &TvConfig) -> Result<TvOutcome> {
    cfg.validate()?;
    let (h, w) = (y.height(), y.width());
    let maps = csm.maps();
    if maps.shape() != y.data().shape() {
        return Err(Error::shape("maps do not match the k-space"));
    }
    let lipschitz = estimate_lipschitz(y, maps)?;
    let mut warnings = Vec::new();
    if cfg.step * lipschitz > 1.0 + 1e-9 {
        warnings.push(format!(
            "step {} exceeds 1/L = {:.6}; monotone descent is not guaranteed",
            cfg.step,
            1.0 / lipschitz
        ));
    }
    let data_obj = |x: &[C64]| -> Result<f64> { dc_objective(&expand_raw(x, maps, h, w)?, y) };
    let objective = |x: &[C64]| -> Result<f64> { Ok(data_obj(x)? + cfg.tau * tv_norm(x, h, w)) };

    let mut x = combine_raw(&ifft2c_coils(y.data()), maps)?;
    let mut dual = Dual::zeros(h, w);
    let mut f = objective(&x)?;
    let mut history = vec![f];
    let mu = cfg.step * cfg.tau;
    for _ in 0..cfg.outer_iters {
        let grad = combine_raw(&dc_gradient(&expand_raw(&x, maps, h, w)?, y)?, maps)?;
        let v: Vec<C64> = x.iter().zip(&grad).map(|(a, g)| a - g * cfg.step).collect();
        let mut accepted = false;
        let mut trial_dual = dual.clone();
        for _round in 0..10 {
            trial_dual.iterate(&v, mu, cfg.prox_iters);
            let u = trial_dual.primal(&v, mu);
            let fu = objective(&u)?;
            if fu <= f {
                x = u;
                f = fu;
                dual = trial_dual;
                accepted = true;
                break;
            }
        }
        if !accepted {
            warnings.push("proximal step rejected after extended dual iterations".into());
        }
        history.push(f);
    }
    Ok(TvOutcome {
        image: ComplexImage::from_vec(h, w, x)?,
        objective: history,
        lipschitz,
        warnings,
    })
}

/// `f(x)` for the TV problem, exposed so other solvers can be compared.
pub fn tv_objective(x: &ComplexImage, y: &MultiCoilKspace, csm: &CoilSensitivities, tau: f64) -> Result<f64> {
    let (h, w) = x.shape();
    Ok(dc_objective(&expand_raw(x.data(), csm.maps(), h, w)?, y)? + tau * tv_norm(x.data(), h, w))
}

/// Anisotropic TV: `Σ |x(r,c+1) − x(r,c)| + |x(r+1,c) − x(r,c)|`.
pub fn tv_norm(x: &[C64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                total += (x[p + 1] - x[p]).norm();
            }
            if r + 1 < h {
                total += (x[p + w] - x[p]).norm();
            }
        }
    }
    total
}

/// Power iteration on `AᴴA`.
fn estimate_lipschitz(y: &MultiCoilKspace, maps: &MultiCoilImage) -> Result<f64> {
    let (h, w) = (y.height(), y.width());
    let zero_y = MultiCoilKspace::masked(MultiCoilImage::zeros(maps.n_coils(), h, w)?, y.mask().clone(), 0.0)?;
    let mut rng = RandomStream::new(0x7f4a_7c15);
    let mut v: Vec<C64> = (0..h * w).map(|_| rng.complex_normal()).collect();
    let mut lambda = 0.0;
    for _ in 0..30 {
        let n = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if n == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|a| *a /= n);
        v = combine_raw(&dc_gradient(&expand_raw(&v, maps, h, w)?, &zero_y)?, maps)?;
        lambda = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    }
    Ok(lambda)
}

/// Dual variables of the TV prox: one complex value per horizontal and per
/// vertical difference, constrained to the unit disc.
#[derive(Clone)]
struct Dual {
    h: usize,
    w: usize,
    px: Vec<C64>,
    py: Vec<C64>,
}

impl Dual {
    fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![ZERO; h * w],
            py: vec![ZERO; h * w],
        }
    }

    /// `Dᵀ p` (negative divergence) for forward differences.
    fn dt(&self) -> Vec<C64> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![ZERO; h * w];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if c + 1 < w {
                    out[p] -= self.px[p];
                    out[p + 1] += self.px[p];
                }
                if r + 1 < h {
                    out[p] -= self.py[p];
                    out[p + w] += self.py[p];
                }
            }
        }
        out
    }

    fn primal(&self, v: &[C64], mu: f64) -> Vec<C64> {
        v.iter().zip(self.dt()).map(|(a, d)| a - d * mu).collect()
    }

    /// Projected gradient on `min_p ½‖v − μ Dᵀp‖²` with step `1/(8μ²)`,
    /// the inverse Lipschitz bound since `‖D‖² ≤ 8`.
    fn iterate(&mut self, v: &[C64], mu: f64, iters: usize) {
        let (h, w) = (self.h, self.w);
        let alpha = 1.0 / (8.0 * mu);
        for _ in 0..iters {
            let u = self.primal(v, mu);
            for r in 0..h {
                for c in 0..w {
                    let p = r * w + c;
                    if c + 1 < w {
                        self.px[p] = project_disc(self.px[p] + (u[p + 1] - u[p]) * alpha);
                    }
                    if r + 1 < h {
                        self.py[p] = project_disc(self.py[p] + (u[p + w] - u[p]) * alpha);
                    }
                }
            }
        }
    }
}

fn project_disc(z: C64) -> C64 {
    let n = z.norm();
    if n > 1.0 {
        z / n
    } else {
        z
    }
}

/// Fitted interpolation weights: for each in-between offset `m ∈ 1..R`,
/// a `(n_c · 4 · kx) × n_c` complex matrix.
#[derive(Clone, Debug)]
pub struct GrappaKernel {
    pub accel: usize,
    pub kernel_hw: (usize, usize),
    pub weights: Vec<DMatrix<C64>>,
    /// Relative calibration residual `‖S W − T‖ / ‖T‖` per offset.
    pub residuals: Vec<f64>,
}

/// Phase-encode source rows relative to the lattice row below the target.
fn source_rows(accel: usize, n_src: usize) -> Vec<isize> {
    // n_src lines centered on the gap: for 4 lines, −R, 0, R, 2R
    let first = -(((n_src - 1) / 2) as isize);
    (0..n_src as isize).map(|i| (first + i) * accel as isize).collect()
}

fn check_grappa_inputs(y: &MultiCoilKspace, kernel_hw: (usize, usize)) -> Result<usize> {
    let (kx, ky) = kernel_hw;
    if kx == 0 || kx % 2 == 0 || ky < 2 {
        return Err(Error::invalid("GRAPPA kernel needs an odd readout width and at least two source lines"));
    }
    let mask = y.mask();
    if mask.kind() == MaskKind::Random {
        return Err(Error::invalid("GRAPPA needs an equispaced lattice"));
    }
    Ok(mask.step())
}

/// Ridge-regularized least-squares fit on every position of the ACS block
/// where the whole source/target geometry fits. `ridge` is relative to the
/// mean diagonal of the normal matrix.
pub fn grappa_calibrate(y: &MultiCoilKspace, kernel_hw: (usize, usize), ridge: f64) -> Result<GrappaKernel> {
    let accel = check_grappa_inputs(y, kernel_hw)?;
    let (kx, ky) = kernel_hw;
    let offsets = source_rows(accel, ky);
    let span = (offsets[ky - 1] - offsets[0]) as usize + 1;
    let acs = y.mask().acs_lines();
    if acs.len() < span {
        return Err(Error::InsufficientAcs {
            required: span,
            found: acs.len(),
        });
    }
    let (nc, _, w) = y.data().shape();
    let half = kx / 2;
    let data = y.data();
    let n_src = nc * ky * kx;
    // base row b: sources at b + offsets, targets at b + m
    let bases: Vec<usize> = (acs.start as isize - offsets[0]..=acs.end as isize - 1 - offsets[ky - 1])
        .map(|b| b as usize)
        .collect();
    let cols: Vec<usize> = (half..w - half).collect();
    let n_eq = bases.len() * cols.len();
    let mut src = DMatrix::<C64>::zeros(n_eq, n_src);
    let mut row = 0;
    for &b in &bases {
        for &c in &cols {
            let mut j = 0;
            for k in 0..nc {
                let plane = data.coil(k);
                for &o in &offsets {
                    let r = (b as isize + o) as usize;
                    for dx in 0..kx {
                        src[(row, j)] = plane[r * w + c + dx - half];
                        j += 1;
                    }
                }
            }
            row += 1;
        }
    }
    let gram = src.adjoint() * &src;
    let mean_diag = (0..n_src).map(|i| gram[(i, i)].re).sum::<f64>() / n_src as f64;
    let mut reg = gram.clone();
    for i in 0..n_src {
        reg[(i, i)] += C64::new(ridge * mean_diag, 0.0);
    }
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::NonFinite("GRAPPA normal equations are not positive definite".into()))?;

    let mut weights = Vec::with_capacity(accel.saturating_sub(1));
    let mut residuals = Vec::with_capacity(accel.saturating_sub(1));
    for m in 1..accel {
        let mut tgt = DMatrix::<C64>::zeros(n_eq, nc);
        let mut row = 0;
        for &b in &bases {
            for &c in &cols {
                for k in 0..nc {
                    tgt[(row, k)] = data.coil(k)[(b + m) * w + c];
                }
                row += 1;
            }
        }
        let wts = chol.solve(&(src.adjoint() * &tgt));
        let resid = (&src * &wts - &tgt).norm() / tgt.norm().max(f64::MIN_POSITIVE);
        weights.push(wts);
        residuals.push(resid);
    }
    Ok(GrappaKernel {
        accel,
        kernel_hw,
        weights,
        residuals,
    })
}

/// Fill every unacquired row from its lattice neighbours. Acquired samples
/// are copied through untouched; sources outside the grid read as zero.
pub fn grappa(y: &MultiCoilKspace, kernel_hw: (usize, usize), ridge: f64) -> Result<MultiCoilKspace> {
    let accel = check_grappa_inputs(y, kernel_hw)?;
    let mask = y.mask();
    let (nc, h, w) = y.data().shape();
    let rows = mask.row_indicator();
    if rows.iter().all(|&r| r) || accel == 1 {
        return Ok(y.clone());
    }
    let kernel = grappa_calibrate(y, kernel_hw, ridge)?;
    let (kx, ky) = kernel_hw;
    let half = kx / 2;
    let offsets = source_rows(accel, ky);
    let data = y.data();
    let mut out = data.clone();
    let lattice = mask.offset();
    let mut sources = vec![ZERO; nc * ky * kx];
    for r in 0..h {
        if rows[r] {
            continue;
        }
        // distance above the lattice row below; lattice rows are always acquired
        let m = (r + accel - lattice % accel) % accel;
        if m == 0 {
            continue;
        }
        let base = r as isize - m as isize;
        let wts = &kernel.weights[m - 1];
        for c in 0..w {
            let mut j = 0;
            for k in 0..nc {
                let plane = data.coil(k);
                for &o in &offsets {
                    let sr = base + o;
                    for dx in 0..kx {
                        let sc = c as isize + dx as isize - half as isize;
                        sources[j] = if sr >= 0 && (sr as usize) < h && sc >= 0 && (sc as usize) < w && rows[sr as usize] {
                            plane[sr as usize * w + sc as usize]
                        } else {
                            ZERO
                        };
                        j += 1;
                    }
                }
            }
            for k in 0..nc {
                let mut acc = ZERO;
                for (jj, s) in sources.iter().enumerate() {
                    acc += s * wts[(jj, k)];
                }
                out.coil_mut(k)[r * w + c] = acc;
            }
        }
    }
    let full = crate::acquisition::SamplingMask::full(h, w);
    MultiCoilKspace::masked(out, full, y.noise_sigma())
}
