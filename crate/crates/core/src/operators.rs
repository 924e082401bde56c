//! The parallel-imaging operator stack. With RSS-normalized maps and the
//! unitary Fourier pair, `forward` has operator norm at most one and every
//! pair below is an exact adjoint pair.

use crate::acquisition::{MultiCoilKspace, SamplingMask};
use crate::csm::CoilSensitivities;
use crate::error::{Error, Result};
use crate::numerics::{fft2c_inplace, ifft2c_inplace, ComplexImage, MultiCoilImage, C64, ZERO};

/// `A = P F S` for one set of maps and one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardModel {
    csm: CoilSensitivities,
    mask: SamplingMask,
}

impl ForwardModel {
    pub fn new(csm: CoilSensitivities, mask: SamplingMask) -> Result<Self> {
        let (_, h, w) = csm.maps().shape();
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::shape(format!(
                "maps {h}x{w} vs mask {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { csm, mask })
    }

    pub fn csm(&self) -> &CoilSensitivities {
        &self.csm
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }
}

/// Coil `k` of the output is `S_k ⊙ x`.
pub fn coil_expand(x: &ComplexImage, csm: &CoilSensitivities) -> Result<MultiCoilImage> {
    expand_raw(x.data(), csm.maps(), x.height(), x.width())
}

pub(crate) fn expand_raw(x: &[C64], maps: &MultiCoilImage, h: usize, w: usize) -> Result<MultiCoilImage> {
    let (nc, mh, mw) = maps.shape();
    if (mh, mw) != (h, w) {
        return Err(Error::shape(format!("image {h}x{w} vs maps {mh}x{mw}")));
    }
    let mut out = MultiCoilImage::zeros(nc, h, w)?;
    for (k, plane) in out.coils_mut().enumerate() {
        for ((o, &s), &v) in plane.iter_mut().zip(maps.coil(k)).zip(x) {
            *o = s * v;
        }
    }
    Ok(out)
}

/// `Σ_k conj(S_k) ⊙ c_k`, the adjoint of [`coil_expand`].
pub fn coil_combine(c: &MultiCoilImage, csm: &CoilSensitivities) -> Result<ComplexImage> {
    let data = combine_raw(c, csm.maps())?;
    ComplexImage::from_vec(c.height(), c.width(), data)
}

pub(crate) fn combine_raw(c: &MultiCoilImage, maps: &MultiCoilImage) -> Result<Vec<C64>> {
    if c.shape() != maps.shape() {
        return Err(Error::shape(format!(
            "coil images {:?} vs maps {:?}",
            c.shape(),
            maps.shape()
        )));
    }
    let mut out = vec![ZERO; c.plane_len()];
    for (plane, smap) in c.coils().zip(maps.coils()) {
        for ((o, &v), &s) in out.iter_mut().zip(plane).zip(smap) {
            *o += s.conj() * v;
        }
    }
    Ok(out)
}

/// Per coil `mask ⊙ fft2c(S_k ⊙ x)`.
pub fn forward(x: &ComplexImage, model: &ForwardModel) -> Result<MultiCoilKspace> {
    let mut coils = coil_expand(x, &model.csm)?;
    let (h, w) = (coils.height(), coils.width());
    for plane in coils.coils_mut() {
        fft2c_inplace(plane, h, w);
    }
    MultiCoilKspace::masked(coils, model.mask.clone(), 0.0)
}

/// `Σ_k conj(S_k) ⊙ ifft2c(mask ⊙ y_k)`; the mask adjoint is zero filling.
pub fn adjoint(y: &MultiCoilKspace, model: &ForwardModel) -> Result<ComplexImage> {
    let mut coils = y.data().clone();
    model.mask.apply(&mut coils);
    let (h, w) = (coils.height(), coils.width());
    for plane in coils.coils_mut() {
        ifft2c_inplace(plane, h, w);
    }
    coil_combine(&coils, &model.csm)
}

fn check_kspace(c: &MultiCoilImage, y: &MultiCoilKspace) -> Result<()> {
    if c.shape() != y.data().shape() {
        return Err(Error::shape(format!(
            "coil images {:?} vs k-space {:?}",
            c.shape(),
            y.data().shape()
        )));
    }
    Ok(())
}

/// `F⁻¹ Pᴴ (P F c_k − y_k)` per coil: the gradient of
/// `g(c) = ½ Σ_k ‖mask ⊙ fft2c(c_k) − y_k‖²`.
pub fn dc_gradient(c: &MultiCoilImage, y: &MultiCoilKspace) -> Result<MultiCoilImage> {
    check_kspace(c, y)?;
    let rows = y.mask().row_indicator();
    let (h, w) = (c.height(), c.width());
    let mut out = c.clone();
    for (plane, yk) in out.coils_mut().zip(y.data().coils()) {
        fft2c_inplace(plane, h, w);
        for (r, (row, yrow)) in plane.chunks_mut(w).zip(yk.chunks(w)).enumerate() {
            if rows[r] {
                for (v, &t) in row.iter_mut().zip(yrow) {
                    *v -= t;
                }
            } else {
                row.fill(ZERO);
            }
        }
        ifft2c_inplace(plane, h, w);
    }
    Ok(out)
}

/// Data-consistency objective `g(c)` matching [`dc_gradient`].
pub fn dc_objective(c: &MultiCoilImage, y: &MultiCoilKspace) -> Result<f64> {
    check_kspace(c, y)?;
    let rows = y.mask().row_indicator();
    let (h, w) = (c.height(), c.width());
    let mut total = 0.0;
    let mut plane = vec![ZERO; h * w];
    for (ck, yk) in c.coils().zip(y.data().coils()) {
        plane.copy_from_slice(ck);
        fft2c_inplace(&mut plane, h, w);
        for (r, (row, yrow)) in plane.chunks(w).zip(yk.chunks(w)).enumerate() {
            if rows[r] {
                total += row.iter().zip(yrow).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
            }
        }
    }
    Ok(0.5 * total)
}

/// `F⁻¹ M F` applied per coil in place (self-adjoint projection).
pub(crate) fn project_sampled(c: &mut MultiCoilImage, mask: &SamplingMask) {
    let rows = mask.row_indicator();
    let (h, w) = (c.height(), c.width());
    for plane in c.coils_mut() {
        fft2c_inplace(plane, h, w);
        for (r, row) in plane.chunks_mut(w).enumerate() {
            if !rows[r] {
                row.fill(ZERO);
            }
        }
        ifft2c_inplace(plane, h, w);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{make_coil_maps, make_mask, MaskKind};
    use crate::numerics::{fft2c, ifft2c, ifft2c_coils, inner, seeded_rng, ComplexArray, RandomStream};

    fn setup(nc: usize, n: usize, seed: u64) -> (ForwardModel, RandomStream) {
        let csm = make_coil_maps(nc, n, n, seed).unwrap();
        let mask = make_mask(n, n, 4.0, n / 4, MaskKind::Equispaced, seed, (seed % 4) as usize).unwrap();
        (ForwardModel::new(csm, mask).unwrap(), seeded_rng(seed + 1000))
    }

    fn random_kspace(rng: &mut RandomStream, model: &ForwardModel) -> MultiCoilKspace {
        let (nc, h, w) = model.csm().maps().shape();
        MultiCoilKspace::masked(rng.multicoil(nc, h, w).unwrap(), model.mask().clone(), 0.0).unwrap()
    }

    fn uniform_single_coil(n: usize) -> CoilSensitivities {
        CoilSensitivities::new(
            MultiCoilImage::from_vec(1, n, n, vec![C64::new(1.0, 0.0); n * n]).unwrap(),
            vec![true; n * n],
        )
        .unwrap()
    }

    #[test]
    fn expand_trivia() {
        let mut rng = seeded_rng(0);
        let x = rng.complex_image(16, 16).unwrap();
        let one = uniform_single_coil(16);
        assert_eq!(coil_expand(&x, &one).unwrap().coil(0), x.data());
        let zero = ComplexImage::zeros(16, 16).unwrap();
        let s = make_coil_maps(3, 16, 16, 0).unwrap();
        assert!(coil_expand(&zero, &s).unwrap().data().iter().all(|v| *v == ZERO));
        let x2 = rng.complex_image(16, 16).unwrap();
        let (a, b) = (C64::new(1.5, -0.5), C64::new(-0.2, 2.0));
        let lhs = coil_expand(&x.lincomb(a, &x2, b).unwrap(), &s).unwrap();
        let rhs = coil_expand(&x, &s).unwrap().lincomb(a, &coil_expand(&x2, &s).unwrap(), b).unwrap();
        assert!(lhs.sub(&rhs).unwrap().norm() <= 1e-12 * rhs.norm());
        let bad = rng.complex_image(16, 8).unwrap();
        assert!(coil_expand(&bad, &s).is_err());
    }

    #[test]
    fn combine_left_inverts_expand_and_is_its_adjoint() {
        let mut rng = seeded_rng(1);
        let s = make_coil_maps(4, 32, 32, 2).unwrap();
        let x = rng.complex_image(32, 32).unwrap();
        let back = coil_combine(&coil_expand(&x, &s).unwrap(), &s).unwrap();
        for p in 0..32 * 32 {
            assert!((back.data()[p] - x.data()[p]).norm() < 1e-10);
        }
        let c = rng.multicoil(4, 32, 32).unwrap();
        let lhs = inner(&coil_expand(&x, &s).unwrap(), &c).unwrap();
        let rhs = inner(&x, &coil_combine(&c, &s).unwrap()).unwrap();
        assert!((lhs - rhs).norm() <= 1e-10 * x.norm() * c.norm());

        let one = uniform_single_coil(32);
        let c1 = rng.multicoil(1, 32, 32).unwrap();
        assert_eq!(coil_combine(&c1, &one).unwrap().data(), c1.coil(0));
    }

    #[test]
    fn forward_and_adjoint_reduce_to_plain_fft() {
        let mut rng = seeded_rng(2);
        let x = rng.complex_image(16, 16).unwrap();
        let model = ForwardModel::new(uniform_single_coil(16), SamplingMask::full(16, 16)).unwrap();
        assert_eq!(forward(&x, &model).unwrap().data().coil(0), fft2c(&x).data());
        let k = rng.complex_image(16, 16).unwrap();
        let y = MultiCoilKspace::masked(MultiCoilImage::from_coils(&[k.clone()]).unwrap(), SamplingMask::full(16, 16), 0.0).unwrap();
        let a = adjoint(&y, &model).unwrap();
        assert!(a.sub(&ifft2c(&k)).unwrap().norm() < 1e-12);
    }

    #[test]
    fn adjoint_identity_and_contraction() {
        for seed in 0..100u64 {
            let n = [16usize, 32][seed as usize % 2];
            let (model, mut rng) = setup(2 + (seed as usize % 3) * 2, n, seed);
            let x = rng.complex_image(n, n).unwrap();
            let y = random_kspace(&mut rng, &model);
            let fx = forward(&x, &model).unwrap();
            let lhs = inner(fx.data(), y.data()).unwrap();
            let rhs = inner(&x, &adjoint(&y, &model).unwrap()).unwrap();
            assert!((lhs - rhs).norm() <= 1e-10 * x.norm() * y.data().norm());
            assert!(fx.data().norm() <= x.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn adjoint_vanishes_off_the_mask() {
        let (model, mut rng) = setup(3, 16, 4);
        let mut data = rng.multicoil(3, 16, 16).unwrap();
        let rows = model.mask().row_indicator();
        for plane in data.coils_mut() {
            for (r, row) in plane.chunks_mut(16).enumerate() {
                if rows[r] {
                    row.fill(ZERO);
                }
            }
        }
        let full = MultiCoilKspace::masked(data, SamplingMask::full(16, 16), 0.0).unwrap();
        let out = adjoint(&full, &model).unwrap();
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn dc_gradient_special_cases() {
        let (model, mut rng) = setup(2, 16, 5);
        let c = rng.multicoil(2, 16, 16).unwrap();
        let mut k = c.clone();
        for plane in k.coils_mut() {
            fft2c_inplace(plane, 16, 16);
        }
        let y = MultiCoilKspace::masked(k, model.mask().clone(), 0.0).unwrap();
        let g = dc_gradient(&c, &y).unwrap();
        assert!(g.norm() < 1e-13 * c.norm(), "residual gradient {}", g.norm());

        let zero = MultiCoilImage::zeros(2, 16, 16).unwrap();
        let g0 = dc_gradient(&zero, &y).unwrap();
        let want = ifft2c_coils(y.data());
        assert!(g0.lincomb(C64::new(1.0, 0.0), &want, C64::new(1.0, 0.0)).unwrap().norm() < 1e-12);
    }

    #[test]
    fn dc_gradient_matches_finite_differences() {
        let (model, mut rng) = setup(2, 16, 6);
        let c = rng.multicoil(2, 16, 16).unwrap();
        let y = random_kspace(&mut rng, &model);
        let g = dc_gradient(&c, &y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in (0..c.data().len()).step_by(7) {
            for dir in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                let mut cp = c.clone();
                cp.data_mut()[idx] += dir * h;
                let mut cm = c.clone();
                cm.data_mut()[idx] -= dir * h;
                let fd = (dc_objective(&cp, &y).unwrap() - dc_objective(&cm, &y).unwrap()) / (2.0 * h);
                let an = g.data()[idx].re * dir.re + g.data()[idx].im * dir.im;
                worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
            }
        }
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn dc_gradient_has_no_content_off_the_mask() {
        let (model, mut rng) = setup(2, 16, 7);
        let c = rng.multicoil(2, 16, 16).unwrap();
        let y = random_kspace(&mut rng, &model);
        let mut k = dc_gradient(&c, &y).unwrap();
        let rows = model.mask().row_indicator();
        for plane in k.coils_mut() {
            fft2c_inplace(plane, 16, 16);
            for (r, row) in plane.chunks(16).enumerate() {
                if !rows[r] {
                    assert!(row.iter().all(|v| v.norm() < 1e-13));
                }
            }
        }
    }
}
