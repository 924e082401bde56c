//! Coil-sensitivity estimation from the auto-calibration (ACS) block.
//!
//! Both estimators share one pipeline: cut the ACS rows, zero-fill and
//! inverse transform to low-resolution coil images `p⁰`, optionally refine
//! them with a CNN, then divide by the root-sum-of-squares on the support.

use crate::acquisition::MultiCoilKspace;
use crate::error::{Error, Result};
use crate::nn::{channels_to_complex, cnn_backward, cnn_forward, complex_to_channels, ActivationTape, CnnGrads, CnnParams};
use crate::numerics::{ifft2c_coils, MultiCoilImage, C64, ZERO};

/// Pixels whose RSS falls below this are left out of the support.
pub const RSS_FLOOR: f64 = 1e-12;

pub const DEFAULT_FOV_THRESHOLD: f64 = 0.1;

/// RSS-normalized coil maps with their support. Maps are zero off support.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    maps: MultiCoilImage,
    fov: Vec<bool>,
}

impl CoilSensitivities {
    /// Wrap maps that already satisfy `Σ_k |S_k|² = 1` on `fov`.
    pub fn new(maps: MultiCoilImage, fov: Vec<bool>) -> Result<Self> {
        if fov.len() != maps.plane_len() {
            return Err(Error::shape(format!(
                "support of {} pixels for {}x{} maps",
                fov.len(),
                maps.height(),
                maps.width()
            )));
        }
        if !maps.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFinite("coil maps".into()));
        }
        let rss = rss(&maps);
        let bad = fov
            .iter()
            .zip(&rss)
            .filter(|(&inside, &r)| inside && (r * r - 1.0).abs() > 1e-8)
            .count();
        if bad > 0 {
            return Err(Error::invalid(format!("{bad} support pixel(s) are not RSS-normalized")));
        }
        Ok(Self { maps, fov })
    }

    pub fn maps(&self) -> &MultiCoilImage {
        &self.maps
    }

    pub fn fov(&self) -> &[bool] {
        &self.fov
    }

    pub fn n_coils(&self) -> usize {
        self.maps.n_coils()
    }

    pub fn into_parts(self) -> (MultiCoilImage, Vec<bool>) {
        (self.maps, self.fov)
    }
}

/// Per-pixel `sqrt(Σ_k |p_k|²)`.
pub fn rss(p: &MultiCoilImage) -> Vec<f64> {
    let mut out = vec![0.0; p.plane_len()];
    for plane in p.coils() {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v.norm_sqr();
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Keep only the ACS rows; the mask becomes the ACS block.
pub fn extract_acs(y: &MultiCoilKspace) -> Result<MultiCoilKspace> {
    let mask = y.mask().acs_only()?;
    MultiCoilKspace::masked(y.data().clone(), mask, y.noise_sigma())
}

/// Low-resolution coil images `p⁰ = F⁻¹(y_ACS)`.
pub fn acs_zero_filled(y_acs: &MultiCoilKspace) -> MultiCoilImage {
    ifft2c_coils(y_acs.data())
}

/// Divide each support pixel by its RSS; zero elsewhere.
pub fn rss_normalize(maps: MultiCoilImage, fov: Vec<bool>) -> Result<CoilSensitivities> {
    if fov.len() != maps.plane_len() {
        return Err(Error::shape("support does not match the map grid"));
    }
    let r = rss(&maps);
    let under = fov.iter().zip(&r).filter(|(&f, &v)| f && !(v > RSS_FLOOR)).count();
    if under > 0 {
        return Err(Error::RssUnderflow { count: under });
    }
    let mut maps = maps;
    for plane in maps.coils_mut() {
        for ((v, &inside), &rv) in plane.iter_mut().zip(&fov).zip(&r) {
            *v = if inside { *v / rv } else { ZERO };
        }
    }
    Ok(CoilSensitivities { maps, fov })
}

/// `RSS(p⁰) ≥ frac · max RSS(p⁰)`, then one 3×3 morphological closing.
/// Pixels outside the grid count as neither set nor blocking.
pub fn fov_support(p0: &MultiCoilImage, threshold_frac: f64) -> Vec<bool> {
    let r = rss(p0);
    let peak = r.iter().cloned().fold(0.0, f64::max);
    let raw: Vec<bool> = r.iter().map(|&v| v > 0.0 && v >= threshold_frac * peak).collect();
    let (h, w) = (p0.height(), p0.width());
    let dilated = morph(&raw, h, w, true);
    morph(&dilated, h, w, false)
}

fn morph(src: &[bool], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            let mut all = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let v = src[yy as usize * w + xx as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[y * w + x] = if dilate { any } else { all };
        }
    }
    out
}

fn support_with_floor(p0: &MultiCoilImage, candidate: &MultiCoilImage, threshold: f64) -> Vec<bool> {
    let r = rss(candidate);
    fov_support(p0, threshold)
        .into_iter()
        .zip(&r)
        .map(|(f, &v)| f && v > RSS_FLOOR)
        .collect()
}

/// Ratio estimator: `S_k = p⁰_k / RSS(p⁰)` on the support of `p⁰`.
pub fn estimate_csm_classical(y: &MultiCoilKspace, fov_threshold: f64) -> Result<CoilSensitivities> {
    let p0 = acs_zero_filled(&extract_acs(y)?);
    if p0.data().iter().all(|v| *v == ZERO) {
        return Err(Error::ZeroCalibration);
    }
    let fov = support_with_floor(&p0, &p0, fov_threshold);
    rss_normalize(p0, fov)
}

/// Intermediates of one network-backed estimate.
#[derive(Clone, Debug)]
pub struct CsmTrace {
    tape: ActivationTape,
    /// Raw complex network output before normalization.
    raw: MultiCoilImage,
    rss: Vec<f64>,
    fov: Vec<bool>,
}

/// Estimate maps with the calibration network `phi`: `p⁰` as `2·n_c` real
/// channels → CNN → complex maps → RSS normalization on the support of
/// `p⁰` (less any pixel the network drives below the RSS floor).
pub fn estimate_csm_network(y: &MultiCoilKspace, phi: &CnnParams, fov_threshold: f64) -> Result<(CoilSensitivities, CsmTrace)> {
    let p0 = acs_zero_filled(&extract_acs(y)?);
    if p0.data().iter().all(|v| *v == ZERO) {
        return Err(Error::ZeroCalibration);
    }
    let (nc, h, w) = p0.shape();
    if phi.arch.in_channels != 2 * nc || phi.arch.out_channels != 2 * nc {
        return Err(Error::shape(format!(
            "calibration network is {}→{} channels but {nc} coils need {}→{}",
            phi.arch.in_channels,
            phi.arch.out_channels,
            2 * nc,
            2 * nc
        )));
    }
    let planes: Vec<&[C64]> = p0.coils().collect();
    let input = complex_to_channels(&planes, h, w)?;
    let (out, tape) = cnn_forward(phi, &input)?;
    let raw = MultiCoilImage::from_vec(nc, h, w, channels_to_complex(&out)?.concat())?;
    if !raw.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(Error::NonFinite("calibration network output".into()));
    }
    let fov = support_with_floor(&p0, &raw, fov_threshold);
    let csm = rss_normalize(raw.clone(), fov.clone())?;
    let trace = CsmTrace {
        tape,
        rss: rss(&raw),
        raw,
        fov,
    };
    Ok((csm, trace))
}

/// Pull a cotangent on the normalized maps back to the network weights.
///
/// With `ρ = RSS(u)` and `S_k = u_k / ρ`, the cotangent on the raw output is
/// `ḡ_{u_k} = ḡ_{S_k}/ρ − u_k · Σ_j Re(conj(ḡ_{S_j}) u_j) / ρ³` on the support.
pub fn estimate_csm_network_backward(phi: &CnnParams, trace: &CsmTrace, grad_maps: &MultiCoilImage) -> Result<CnnGrads> {
    if grad_maps.shape() != trace.raw.shape() {
        return Err(Error::shape("map cotangent does not match the estimate"));
    }
    let (nc, h, w) = trace.raw.shape();
    let n = h * w;
    let mut gu = MultiCoilImage::zeros(nc, h, w)?;
    for p in 0..n {
        if !trace.fov[p] {
            continue;
        }
        let rho = trace.rss[p];
        let mut a = 0.0;
        for k in 0..nc {
            let g = grad_maps.coil(k)[p];
            let u = trace.raw.coil(k)[p];
            a += g.re * u.re + g.im * u.im;
        }
        let rho3 = rho * rho * rho;
        for k in 0..nc {
            let g = grad_maps.coil(k)[p];
            let u = trace.raw.coil(k)[p];
            gu.coil_mut(k)[p] = g / rho - u * (a / rho3);
        }
    }
    let planes: Vec<&[C64]> = gu.coils().collect();
    let grad_out = complex_to_channels(&planes, h, w)?;
    let (grads, _) = cnn_backward(phi, &trace.tape, &grad_out)?;
    Ok(grads)
}
