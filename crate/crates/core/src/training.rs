//! Cross-prediction loss with a map smoothness penalty, the minibatch Adam
//! loop over paired measurements, and checkpoint persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acquisition::{MultiCoilKspace, TrainingPair};
use crate::csm::CoilSensitivities;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState};
use crate::numerics::{fft2c_inplace, ifft2c_inplace, ComplexImage, MultiCoilImage, RandomStream};
use crate::operators::{combine_raw, expand_raw};
use crate::storage::{header_field, read_container, write_container, PayloadReader, PayloadWriter, Precision, CHECKPOINT_MAGIC};
use crate::unroll::{accumulate_map_grad, spicer_reconstruct, unroll_backward, ModelGrads, ModelParams, ModelSpec, UnrollTrace};

pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first_epoch, lr)` pairs; the last threshold not above the current
    /// epoch wins.
    pub lr_schedule: Vec<(usize, f64)>,
    pub lambda_smooth: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub denoiser_width: usize,
    pub csm_width: usize,
    pub shared_denoiser: bool,
    pub detach_loop_csm: bool,
    pub fov_threshold: f64,
    /// Squared instead of plain ℓ2 norm per cross-prediction term.
    pub squared_loss: bool,
    /// Keep the calibration network at its initial (ratio-estimator) state.
    pub freeze_csm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            lr_schedule: vec![(0, 1e-3), (30, 1e-4)],
            lambda_smooth: DEFAULT_LAMBDA,
            steps: crate::unroll::DEFAULT_STEPS,
            seed: 0,
            precision: Precision::F64,
            denoiser_width: 16,
            csm_width: 16,
            shared_denoiser: false,
            detach_loop_csm: false,
            fov_threshold: crate::csm::DEFAULT_FOV_THRESHOLD,
            squared_loss: false,
            freeze_csm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::invalid("lambda_smooth must be finite and non-negative"));
        }
        match self.lr_schedule.first() {
            Some(&(0, _)) => {}
            _ => return Err(Error::invalid("lr schedule must start at epoch 0")),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("lr schedule thresholds must increase"));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map(|&(_, lr)| lr)
            .unwrap_or(self.lr_schedule[0].1)
    }

    pub fn model_spec(&self, n_coils: usize) -> ModelSpec {
        ModelSpec {
            steps: self.steps,
            n_coils,
            denoiser_width: self.denoiser_width,
            csm_width: self.csm_width,
            shared_denoiser: self.shared_denoiser,
            fov_threshold: self.fov_threshold,
            detach_loop_csm: self.detach_loop_csm,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda_smooth: self.lambda_smooth,
            squared: self.squared_loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub lambda_smooth: f64,
    pub squared: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda_smooth: DEFAULT_LAMBDA,
            squared: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub rec: f64,
    /// `loss_smooth(S) + loss_smooth(S′)`, before weighting.
    pub smooth: f64,
    pub total: f64,
}

/// `‖A′x − y′‖ + ‖Ax′ − y‖`: each reconstruction is scored only against the
/// other measurement, through that measurement's own maps and mask.
pub fn loss_rec(pair: &TrainingPair, params: &ModelParams) -> Result<f64> {
    Ok(evaluate(pair, params, &LossOptions { lambda_smooth: 0.0, squared: false }, false)?.0.rec)
}

/// Squared forward differences (both axes) of every coil map, over pixel
/// pairs with both ends inside the support.
pub fn loss_smooth(s: &CoilSensitivities) -> f64 {
    smooth_impl(s, None)
}

pub fn total_loss(pair: &TrainingPair, params: &ModelParams, lambda_smooth: f64) -> Result<f64> {
    Ok(evaluate(pair, params, &LossOptions { lambda_smooth, squared: false }, false)?.0.total)
}

pub fn total_loss_and_grad(pair: &TrainingPair, params: &ModelParams, opts: &LossOptions) -> Result<(LossValue, ModelGrads)> {
    let (value, grads) = evaluate(pair, params, opts, true)?;
    Ok((value, grads.expect("gradient requested")))
}

pub fn loss_value(pair: &TrainingPair, params: &ModelParams, opts: &LossOptions) -> Result<LossValue> {
    Ok(evaluate(pair, params, opts, false)?.0)
}

struct Side {
    x: ComplexImage,
    s: CoilSensitivities,
    trace: UnrollTrace,
}

fn evaluate(pair: &TrainingPair, params: &ModelParams, opts: &LossOptions, want_grad: bool) -> Result<(LossValue, Option<ModelGrads>)> {
    let run = |y: &MultiCoilKspace| -> Result<Side> {
        let (x, s, trace) = spicer_reconstruct(y, params)?;
        Ok(Side { x, s, trace })
    };
    let a = run(&pair.y)?;
    let b = run(&pair.y_prime)?;

    // x from y predicts y′ through S′; x′ from y′ predicts y through S
    let (r1, gx_a, gs_b) = cross_term(&a.x, &b.s, &pair.y_prime, opts.squared, want_grad)?;
    let (r2, gx_b, gs_a) = cross_term(&b.x, &a.s, &pair.y, opts.squared, want_grad)?;

    let (mut gs_a, mut gs_b) = (gs_a, gs_b);
    let smooth = smooth_impl(&a.s, gs_a.as_mut().map(|g| (g, opts.lambda_smooth)))
        + smooth_impl(&b.s, gs_b.as_mut().map(|g| (g, opts.lambda_smooth)));
    let rec = r1 + r2;
    let value = LossValue {
        rec,
        smooth,
        total: rec + opts.lambda_smooth * smooth,
    };
    if !want_grad {
        return Ok((value, None));
    }
    let mut grads = unroll_backward(&a.trace, params, &gx_a.expect("grad"), gs_a.as_ref())?;
    grads.add_assign(&unroll_backward(&b.trace, params, &gx_b.expect("grad"), gs_b.as_ref())?);
    Ok((value, Some(grads)))
}

type CrossGrad = (f64, Option<ComplexImage>, Option<MultiCoilImage>);

/// `v = M F (S ⊙ x) − y`; returns `‖v‖` (or `‖v‖²`) and, on request, the
/// cotangents on `x` and on the maps.
fn cross_term(x: &ComplexImage, s: &CoilSensitivities, y: &MultiCoilKspace, squared: bool, want_grad: bool) -> Result<CrossGrad> {
    let (h, w) = x.shape();
    let maps = s.maps();
    let mut v = expand_raw(x.data(), maps, h, w)?;
    for plane in v.coils_mut() {
        fft2c_inplace(plane, h, w);
    }
    y.mask().apply(&mut v);
    for (a, b) in v.data_mut().iter_mut().zip(y.data().data()) {
        *a -= b;
    }
    let norm_sq: f64 = v.data().iter().map(|c| c.norm_sqr()).sum();
    let norm = norm_sq.sqrt();
    let value = if squared { norm_sq } else { norm };
    if !want_grad {
        return Ok((value, None, None));
    }
    // ∂‖v‖ = v/‖v‖ (zero at the kink), ∂‖v‖² = 2v
    let scale = if squared {
        2.0
    } else if norm > 0.0 {
        1.0 / norm
    } else {
        0.0
    };
    let mut g = v;
    for plane in g.coils_mut() {
        for c in plane.iter_mut() {
            *c *= scale;
        }
        // v is already zero off the mask, so Fᴴ Mᴴ reduces to Fᴴ
        ifft2c_inplace(plane, h, w);
    }
    let gx = ComplexImage::from_vec(h, w, combine_raw(&g, maps)?)?;
    let mut gs = MultiCoilImage::zeros(maps.n_coils(), h, w)?;
    accumulate_map_grad(&mut gs, &g, x.data());
    Ok((value, Some(gx), Some(gs)))
}

fn smooth_impl(s: &CoilSensitivities, grad: Option<(&mut MultiCoilImage, f64)>) -> f64 {
    let maps = s.maps();
    let (_, h, w) = maps.shape();
    let fov = s.fov();
    let mut total = 0.0;
    let mut grad = grad;
    for k in 0..maps.n_coils() {
        let m = maps.coil(k);
        let mut visit = |p: usize, q: usize, grad: &mut Option<(&mut MultiCoilImage, f64)>| {
            if !(fov[p] && fov[q]) {
                return;
            }
            let d = m[q] - m[p];
            total += d.norm_sqr();
            if let Some((g, lambda)) = grad {
                let gd = d * (2.0 * *lambda);
                let plane = g.coil_mut(k);
                plane[q] += gd;
                plane[p] -= gd;
            }
        };
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if c + 1 < w {
                    visit(p, p + 1, &mut grad);
                }
                if r + 1 < h {
                    visit(p, p + w, &mut grad);
                }
            }
        }
    }
    total
}

/// Trained model plus everything needed to resume or audit the run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean total loss per completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

pub fn train(dataset: &[TrainingPair], config: &TrainConfig) -> Result<Checkpoint> {
    train_with(dataset, config, None, &mut |_| {})
}

/// Train from scratch, or continue `resume` up to `config.epochs` total
/// epochs. Shuffles are keyed by `(seed, epoch)`, so an interrupted and
/// resumed run replays the same batches.
pub fn train_with(
    dataset: &[TrainingPair],
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<Checkpoint> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::invalid("training needs at least one pair"))?;
    let shape = first.shape();
    if let Some(i) = dataset.iter().position(|p| p.shape() != shape) {
        return Err(Error::shape(format!("pair {i} has shape {:?}, expected {shape:?}", dataset[i].shape())));
    }
    let spec = config.model_spec(shape.0);
    let mut ckpt = match resume {
        Some(c) => {
            if c.params.spec != spec {
                return Err(Error::invalid("checkpoint architecture does not match the configuration"));
            }
            Checkpoint { config: config.clone(), ..c }
        }
        None => {
            let mut rng = RandomStream::new(config.seed);
            let params = ModelParams::init(spec, &mut rng)?;
            let adam = AdamState::new(params.param_count());
            Checkpoint {
                params,
                adam,
                config: config.clone(),
                epoch: 0,
                loss_history: Vec::new(),
            }
        }
    };
    let opts = config.loss_options();
    let mut step = ckpt.adam.step_count;
    while ckpt.epoch < config.epochs {
        let epoch = ckpt.epoch;
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        RandomStream::new(shuffle_seed(config.seed, epoch)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = ckpt.params.zero_grads();
            for &i in batch {
                let (value, grads) = total_loss_and_grad(&dataset[i], &ckpt.params, &opts).map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} (sample {i}, epoch {epoch}, step {step})")),
                    other => other,
                })?;
                if !value.total.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFinite(format!("loss or gradient at sample {i}, epoch {epoch}, step {step}")));
                }
                loss_sum += value.total;
                acc.add_assign(&grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            if config.freeze_csm {
                acc.phi = acc.phi.zeros_like();
            }
            let g = acc.slices();
            adam_step(&mut ckpt.params.slices_mut(), &g, &mut ckpt.adam, lr)?;
            step += 1;
        }
        let mean_loss = loss_sum / dataset.len() as f64;
        ckpt.loss_history.push(mean_loss);
        ckpt.epoch += 1;
        on_epoch(&EpochReport { epoch, mean_loss, lr });
    }
    Ok(ckpt)
}

/// A training run with checkpoint selection on held-out pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedRun {
    /// State after the last epoch, resumable as usual.
    pub last: Checkpoint,
    /// State after the epoch with the lowest validation loss; its `epoch`
    /// field says which one.
    pub selected: Checkpoint,
    /// Mean training objective on the validation pairs after each epoch.
    pub validation_loss: Vec<f64>,
}

/// Mean training objective over `pairs`. Uses the measurements only, so it
/// can rank checkpoints without references. The smoothness term matters:
/// early maps that stay close to the ratio estimate fit held-out data best
/// while giving worse images.
pub fn validation_loss(pairs: &[TrainingPair], params: &ModelParams, opts: &LossOptions) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("validation needs at least one pair"));
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += loss_value(p, params, opts)?.total;
    }
    Ok(sum / pairs.len() as f64)
}

/// [`train_with`] for `config.epochs` epochs, scoring the model on
/// `validation` after every epoch and keeping the best-scoring parameters.
/// The optimizer trajectory is identical to an unvalidated run.
pub fn train_validated(
    dataset: &[TrainingPair],
    validation: &[TrainingPair],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochReport, f64),
) -> Result<ValidatedRun> {
    let opts = config.loss_options();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut ckpt: Option<Checkpoint> = None;
    for e in 1..=config.epochs {
        let mut report = None;
        let step_cfg = TrainConfig { epochs: e, ..config.clone() };
        let next = train_with(dataset, &step_cfg, ckpt.take(), &mut |r| report = Some(*r))?;
        let v = validation_loss(validation, &next.params, &opts)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("validation loss after epoch {e}")));
        }
        history.push(v);
        if best.as_ref().map_or(true, |(b, _)| v < *b) {
            best = Some((v, next.clone()));
        }
        if let Some(r) = report {
            on_epoch(&r, v);
        }
        ckpt = Some(next);
    }
    let mut last = ckpt.ok_or_else(|| Error::invalid("epochs must be at least 1"))?;
    last.config = config.clone();
    let (_, selected) = best.expect("at least one epoch ran");
    Ok(ValidatedRun { last, selected, validation_loss: history })
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: ArchitectureHeader,
    #[serde(rename = "K")]
    steps: usize,
    channel_widths: ChannelWidths,
    lambda: f64,
    epoch: usize,
    loss_history: Vec<f64>,
    model: ModelSpec,
    config: TrainConfig,
    adam: AdamState,
    n_params: usize,
    layout: String,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureHeader {
    denoiser: crate::nn::Architecture,
    csm: crate::nn::Architecture,
    denoiser_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ChannelWidths {
    denoiser: usize,
    csm: usize,
}

const LAYOUT: &str = "f64 LE: for each denoiser then the calibration network, per layer kernel[out][in][3][3] then bias[out]; \
then gamma[K], tau[K]; then Adam first moments and second moments in the same order";

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let p = &ckpt.params;
    if ckpt.loss_history.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss history".into()));
    }
    let n = p.param_count();
    if ckpt.adam.len() != n {
        return Err(Error::shape("optimizer state does not match the parameters"));
    }
    let header = CheckpointHeader {
        architecture: ArchitectureHeader {
            denoiser: p.spec.denoiser_arch(),
            csm: p.spec.csm_arch(),
            denoiser_count: p.theta.len(),
        },
        steps: p.spec.steps,
        channel_widths: ChannelWidths {
            denoiser: p.spec.denoiser_width,
            csm: p.spec.csm_width,
        },
        lambda: ckpt.config.lambda_smooth,
        epoch: ckpt.epoch,
        loss_history: ckpt.loss_history.clone(),
        model: p.spec,
        config: ckpt.config.clone(),
        adam: ckpt.adam.clone(),
        n_params: n,
        layout: LAYOUT.into(),
    };
    let mut payload = PayloadWriter::default();
    for s in p.slices() {
        payload.reals(s);
    }
    payload.reals(&ckpt.adam.m);
    payload.reals(&ckpt.adam.v);
    let value = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
    write_container(path.as_ref(), CHECKPOINT_MAGIC, json!(value), &payload.bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let (value, payload) = read_container(path.as_ref(), CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_value(value.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let _: usize = header_field(&value, "payload_bytes")?;
    let mut params = ModelParams::zeros(header.model)?;
    let n = params.param_count();
    if n != header.n_params {
        return Err(Error::Format(format!("header declares {} parameters, architecture implies {n}", header.n_params)));
    }
    let mut reader = PayloadReader::new(&payload);
    for s in params.slices_mut() {
        let vals = reader.reals(s.len())?;
        s.copy_from_slice(&vals);
    }
    let mut adam = header.adam;
    adam.m = reader.reals(n)?;
    adam.v = reader.reals(n)?;
    reader.finish()?;
    if !params.is_finite() || header.loss_history.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint contents".into()));
    }
    Ok(Checkpoint {
        params,
        adam,
        config: header.config,
        epoch: header.epoch,
        loss_history: header.loss_history,
    })
}
