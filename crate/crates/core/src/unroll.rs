//! K-step unrolled reconstruction with a jointly estimated set of coil maps.
//!
//! ```text
//! S      = P_φ(p⁰)                      (csm::estimate_csm_network)
//! c⁰     = F⁻¹ y                        (per coil, zero filled)
//! z_k    = Σ_j conj(S_j) c^k_j
//! r_k    = R_θk(z_k)
//! c^{k+1} = c^k − γ_k (∇g(c^k, y) + τ_k S r_k)
//! x      = Σ_j conj(S_j) c^K_j
//! ```
//!
//! Cotangents follow the convention `ḡ = ∂L/∂Re + i ∂L/∂Im`, so a linear map
//! pulls back through its adjoint and `a ⊙ b` sends `conj(b) ḡ` to `a`.

use serde::{Deserialize, Serialize};

use crate::acquisition::{MultiCoilKspace, SamplingMask};
use crate::csm::{estimate_csm_network, estimate_csm_network_backward, CoilSensitivities, CsmTrace, DEFAULT_FOV_THRESHOLD};
use crate::error::{Error, Result};
use crate::nn::{channels_to_complex, cnn_backward, cnn_forward, complex_to_channels, ActivationTape, Architecture, CnnGrads, CnnParams};
use crate::numerics::{ifft2c_coils, real_inner, ComplexImage, MultiCoilImage, RandomStream, C64, ZERO};
use crate::operators::{combine_raw, dc_gradient, expand_raw, project_sampled};

pub const DEFAULT_STEPS: usize = 8;
pub const MAX_STEPS: usize = 16;
pub const INITIAL_GAMMA: f64 = 1.0;
pub const INITIAL_TAU: f64 = 0.1;

/// Shape and behaviour of a model, independent of its weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub steps: usize,
    pub n_coils: usize,
    pub denoiser_width: usize,
    pub csm_width: usize,
    /// One denoiser reused by every step instead of one per step.
    pub shared_denoiser: bool,
    pub fov_threshold: f64,
    /// Treat the maps as constants inside the loop (final combine still
    /// carries gradient).
    pub detach_loop_csm: bool,
}

impl ModelSpec {
    pub fn new(steps: usize, n_coils: usize) -> Self {
        Self {
            steps,
            n_coils,
            denoiser_width: 16,
            csm_width: 16,
            shared_denoiser: false,
            fov_threshold: DEFAULT_FOV_THRESHOLD,
            detach_loop_csm: false,
        }
    }

    pub fn denoiser_arch(&self) -> Architecture {
        Architecture::unet_lite(2, 2, false).with_width(self.denoiser_width)
    }

    pub fn csm_arch(&self) -> Architecture {
        Architecture::unet_lite(2 * self.n_coils, 2 * self.n_coils, true).with_width(self.csm_width)
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > MAX_STEPS {
            return Err(Error::invalid(format!("unroll steps must lie in [1, {MAX_STEPS}], got {}", self.steps)));
        }
        if self.n_coils == 0 {
            return Err(Error::invalid("at least one coil is required"));
        }
        if !(self.fov_threshold > 0.0 && self.fov_threshold < 1.0) {
            return Err(Error::invalid("fov threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// All trainables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub theta: Vec<CnnParams>,
    pub phi: CnnParams,
    pub gamma: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Gradients with the layout of [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub theta: Vec<CnnGrads>,
    pub phi: CnnGrads,
    pub gamma: Vec<f64>,
    pub tau: Vec<f64>,
}

impl ModelParams {
    /// Denoisers start at zero output (zero final layer), the calibration
    /// network starts as the ratio estimator (residual + zero final layer),
    /// `γ = 1` and `τ = 0.1`.
    pub fn init(spec: ModelSpec, rng: &mut RandomStream) -> Result<Self> {
        spec.validate()?;
        let n_theta = if spec.shared_denoiser { 1 } else { spec.steps };
        let theta = (0..n_theta)
            .map(|_| CnnParams::init(spec.denoiser_arch(), rng))
            .collect::<Result<Vec<_>>>()?;
        let phi = CnnParams::init(spec.csm_arch(), rng)?;
        Ok(Self {
            spec,
            theta,
            phi,
            gamma: vec![INITIAL_GAMMA; spec.steps],
            tau: vec![INITIAL_TAU; spec.steps],
        })
    }

    /// All-zero weights with the shapes `spec` implies (for loading).
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n_theta = if spec.shared_denoiser { 1 } else { spec.steps };
        let theta = (0..n_theta)
            .map(|_| CnnParams::zeros(spec.denoiser_arch()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            theta,
            phi: CnnParams::zeros(spec.csm_arch())?,
            gamma: vec![0.0; spec.steps],
            tau: vec![0.0; spec.steps],
        })
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn denoiser(&self, step: usize) -> &CnnParams {
        &self.theta[if self.spec.shared_denoiser { 0 } else { step }]
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            theta: self.theta.iter().map(CnnParams::zeros_like).collect(),
            phi: self.phi.zeros_like(),
            gamma: vec![0.0; self.gamma.len()],
            tau: vec![0.0; self.tau.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Storage order: every θ_k (layer by layer, kernel then bias), φ, γ, τ.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.theta.iter().flat_map(|t| t.slices()).collect();
        out.extend(self.phi.slices());
        out.push(&self.gamma);
        out.push(&self.tau);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.theta.iter_mut().flat_map(|t| t.slices_mut()).collect();
        out.extend(self.phi.slices_mut());
        out.push(&mut self.gamma);
        out.push(&mut self.tau);
        out
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in self.slices() {
            for v in s {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.theta.iter().flat_map(|t| t.slices()).collect();
        out.extend(self.phi.slices());
        out.push(&self.gamma);
        out.push(&self.tau);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.theta.iter_mut().flat_map(|t| t.slices_mut()).collect();
        out.extend(self.phi.slices_mut());
        out.push(&mut self.gamma);
        out.push(&mut self.tau);
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Forward intermediates for [`unroll_backward`]. Storage grows linearly in K.
#[derive(Clone, Debug)]
pub struct UnrollTrace {
    fingerprint: u64,
    mask: SamplingMask,
    pub c_states: Vec<MultiCoilImage>,
    pub csm: CoilSensitivities,
    csm_trace: CsmTrace,
    dc_grads: Vec<MultiCoilImage>,
    denoised: Vec<Vec<C64>>,
    tapes: Vec<ActivationTape>,
}

pub fn spicer_reconstruct(y: &MultiCoilKspace, params: &ModelParams) -> Result<(ComplexImage, CoilSensitivities, UnrollTrace)> {
    let spec = &params.spec;
    if y.n_coils() != spec.n_coils {
        return Err(Error::shape(format!("model expects {} coils, k-space has {}", spec.n_coils, y.n_coils())));
    }
    let (h, w) = (y.height(), y.width());
    let (csm, csm_trace) = estimate_csm_network(y, &params.phi, spec.fov_threshold)?;
    let maps = csm.maps();

    let mut c = ifft2c_coils(y.data());
    let mut trace = UnrollTrace {
        fingerprint: params.fingerprint(),
        mask: y.mask().clone(),
        c_states: Vec::with_capacity(spec.steps + 1),
        csm: csm.clone(),
        csm_trace,
        dc_grads: Vec::with_capacity(spec.steps),
        denoised: Vec::with_capacity(spec.steps),
        tapes: Vec::with_capacity(spec.steps),
    };
    for k in 0..spec.steps {
        let z = combine_raw(&c, maps)?;
        let input = complex_to_channels(&[&z], h, w)?;
        let (out, tape) = cnn_forward(params.denoiser(k), &input)?;
        let r = channels_to_complex(&out)?.pop().expect("two output channels");
        let e = expand_raw(&r, maps, h, w)?;
        let d = dc_gradient(&c, y)?;
        let (gamma, tau) = (params.gamma[k], params.tau[k]);
        let mut next = c.clone();
        for ((n, &dv), &ev) in next.data_mut().iter_mut().zip(d.data()).zip(e.data()) {
            *n -= (dv + ev * tau) * gamma;
        }
        trace.c_states.push(c);
        trace.dc_grads.push(d);
        trace.denoised.push(r);
        trace.tapes.push(tape);
        c = next;
    }
    let x = ComplexImage::from_vec(h, w, combine_raw(&c, maps)?)?;
    if !x.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(Error::NonFinite("reconstruction".into()));
    }
    trace.c_states.push(c);
    Ok((x, csm, trace))
}

/// Reverse pass. `grad_x` is the cotangent on the image; `grad_maps`, when
/// given, is an extra cotangent on the estimated maps (losses that reuse S).
pub fn unroll_backward(
    trace: &UnrollTrace,
    params: &ModelParams,
    grad_x: &ComplexImage,
    grad_maps: Option<&MultiCoilImage>,
) -> Result<ModelGrads> {
    if trace.fingerprint != params.fingerprint() || trace.tapes.len() != params.steps() {
        return Err(Error::StaleTape);
    }
    let maps = trace.csm.maps();
    let (nc, h, w) = maps.shape();
    if grad_x.shape() != (h, w) {
        return Err(Error::shape("image cotangent does not match the reconstruction"));
    }
    let detach = params.spec.detach_loop_csm;
    let mut grads = params.zero_grads();
    let mut g_maps = match grad_maps {
        Some(g) if g.shape() == maps.shape() => g.clone(),
        Some(_) => return Err(Error::shape("map cotangent does not match the estimate")),
        None => MultiCoilImage::zeros(nc, h, w)?,
    };

    // x = Σ conj(S_j) c^K_j
    let c_k = &trace.c_states[params.steps()];
    let mut g_c = expand_raw(grad_x.data(), maps, h, w)?;
    accumulate_map_grad(&mut g_maps, c_k, grad_x.data());

    for k in (0..params.steps()).rev() {
        let (gamma, tau) = (params.gamma[k], params.tau[k]);
        let r = &trace.denoised[k];
        let e = expand_raw(r, maps, h, w)?;
        let d = &trace.dc_grads[k];

        let ge = real_inner(g_c.data(), e.data());
        grads.gamma[k] = -(real_inner(g_c.data(), d.data()) + tau * ge);
        grads.tau[k] = -gamma * ge;

        // regularization branch: ḡ_e = −γτ ḡ_c
        let scale = -gamma * tau;
        let g_e = g_c.lincomb(C64::new(scale, 0.0), &g_c, ZERO)?;
        let g_r = combine_raw(&g_e, maps)?;
        if !detach {
            accumulate_map_grad(&mut g_maps, &g_e, r);
        }
        let g_out = complex_to_channels(&[&g_r], h, w)?;
        let (theta_grads, g_in) = cnn_backward(params.denoiser(k), &trace.tapes[k], &g_out)?;
        let slot = if params.spec.shared_denoiser { 0 } else { k };
        grads.theta[slot].add_assign(&theta_grads);
        let g_z = channels_to_complex(&g_in)?.pop().expect("two input channels");
        let prev = &trace.c_states[k];
        if !detach {
            accumulate_map_grad(&mut g_maps, prev, &g_z);
        }
        let from_z = expand_raw(&g_z, maps, h, w)?;

        // data-consistency branch: d is F⁻¹ M F c − const, self-adjoint
        let mut from_dc = g_c.clone();
        project_sampled(&mut from_dc, &trace.mask);

        for ((gc, &fz), &fd) in g_c.data_mut().iter_mut().zip(from_z.data()).zip(from_dc.data()) {
            *gc += fz - fd * gamma;
        }
    }

    grads.phi = estimate_csm_network_backward(&params.phi, &trace.csm_trace, &g_maps)?;
    Ok(grads)
}

/// For `out = Σ_j conj(S_j) c_j` with cotangent `g`: `ḡ_{S_j} += c_j conj(g)`.
/// For `e_j = S_j r` with cotangent `ḡ_e`: `ḡ_{S_j} += ḡ_{e_j} conj(r)`.
/// Both are the same product shape, so one helper covers them.
pub(crate) fn accumulate_map_grad(g_maps: &mut MultiCoilImage, per_coil: &MultiCoilImage, shared: &[C64]) {
    for (gm, pc) in g_maps.coils_mut().zip(per_coil.coils()) {
        for ((g, &c), &s) in gm.iter_mut().zip(pc).zip(shared) {
            *g += c * s.conj();
        }
    }
}
