//! Synthetic dataset generation and per-method evaluation shared by the
//! command line and the acceptance suite, so both score through one path.

use serde::{Deserialize, Serialize};

use crate::acquisition::{default_noise_sigma, make_coil_maps, make_phantom, make_training_pair, PhantomKind, TrainingPair};
use crate::baselines::{grappa, tv_reconstruct_with_history, zero_filled_recon, TvConfig, TvOutcome};
use crate::csm::{estimate_csm_classical, DEFAULT_FOV_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{reference_region, score, ImageScores, MetricsSummary, Region};
use crate::numerics::{ComplexImage, RandomStream};
use crate::training::loss_smooth;
use crate::unroll::{spicer_reconstruct, ModelParams};

/// Kernel and ridge used wherever GRAPPA runs with defaults.
pub const GRAPPA_KERNEL: (usize, usize) = (5, 4);
pub const GRAPPA_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub n_coils: usize,
    pub accel: f64,
    pub acs_count: usize,
    /// `None` uses [`default_noise_sigma`] of each phantom.
    pub noise_sigma: Option<f64>,
    pub phantom: PhantomKind,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_train: 32,
            n_test: 8,
            height: 64,
            width: 64,
            n_coils: 4,
            accel: 4.0,
            acs_count: 12,
            noise_sigma: None,
            phantom: PhantomKind::SmoothRandom,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test == 0 {
            return Err(Error::invalid("nothing to simulate: n_train and n_test are both zero"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!("image size {}x{} is below 8x8", self.height, self.width)));
        }
        if !(2..=32).contains(&self.n_coils) {
            return Err(Error::invalid(format!("n_c must lie in [2, 32], got {}", self.n_coils)));
        }
        if !(self.accel >= 1.0 && self.accel.is_finite()) {
            return Err(Error::invalid(format!("acceleration must be >= 1, got {}", self.accel)));
        }
        if self.acs_count == 0 || self.acs_count > self.height {
            return Err(Error::invalid(format!(
                "ACS count {} must lie in [1, {}]",
                self.acs_count, self.height
            )));
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid("noise sigma must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Train and test pairs. Each object draws one 64-bit sample seed from a
/// stream keyed by `cfg.seed`; the phantom, coil maps and pair use that seed
/// and its two successors. Test objects continue the same stream, so the
/// splits never share an object.
pub fn simulate_split(cfg: &SimulationConfig) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    cfg.validate()?;
    let mut master = RandomStream::new(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.n_train + cfg.n_test);
    for _ in 0..cfg.n_train + cfg.n_test {
        let s = master.next_u64();
        let x = make_phantom(cfg.height, cfg.width, s, cfg.phantom)?;
        let maps = make_coil_maps(cfg.n_coils, cfg.height, cfg.width, s.wrapping_add(1))?;
        let sigma = cfg.noise_sigma.unwrap_or_else(|| default_noise_sigma(&x));
        pairs.push(make_training_pair(&x, &maps, cfg.accel, cfg.acs_count, sigma, s.wrapping_add(2))?);
    }
    let test = pairs.split_off(cfg.n_train);
    Ok((pairs, test))
}

/// Reconstruction methods scored on the first measurement `y` of a pair.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    /// RSS of the per-coil zero-filled images.
    ZeroFilled,
    /// TV with maps from the ACS ratio estimator.
    Tv(TvConfig),
    /// RSS of the GRAPPA-filled k-space.
    Grappa { kernel_hw: (usize, usize), ridge: f64 },
    Spicer(&'a ModelParams),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero_filled",
            Method::Tv(_) => "tv",
            Method::Grappa { .. } => "grappa",
            Method::Spicer(_) => "spicer",
        }
    }
}

pub fn reconstruct(pair: &TrainingPair, method: &Method) -> Result<ComplexImage> {
    let y = &pair.y;
    match method {
        Method::ZeroFilled => zero_filled_recon(y, None),
        Method::Tv(cfg) => tv_outcome(pair, cfg).map(|o| o.image),
        Method::Grappa { kernel_hw, ridge } => zero_filled_recon(&grappa(y, *kernel_hw, *ridge)?, None),
        Method::Spicer(params) => spicer_reconstruct(y, params).map(|(x, _, _)| x),
    }
}

/// TV on `y` with maps from the ACS ratio estimator, with its objective
/// history.
pub fn tv_outcome(pair: &TrainingPair, cfg: &TvConfig) -> Result<TvOutcome> {
    let s = estimate_csm_classical(&pair.y, DEFAULT_FOV_THRESHOLD)?;
    tv_reconstruct_with_history(&pair.y, &s, cfg)
}

/// Scores of one reconstruction against the pair's ground truth, over the
/// object support (`Region::Fov`) or the whole frame.
pub fn score_against_truth(pair: &TrainingPair, recon: &ComplexImage, region: Region) -> Result<ImageScores> {
    let truth = pair
        .ground_truth()
        .ok_or_else(|| Error::invalid("pair carries no ground truth to score against"))?;
    match region {
        Region::Fov => score(recon, truth, Some(&reference_region(truth))),
        Region::Full => score(recon, truth, None),
    }
}

pub fn evaluate(pairs: &[TrainingPair], method: &Method, region: Region) -> Result<(MetricsSummary, Vec<ImageScores>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let scores = pairs
        .iter()
        .map(|p| score_against_truth(p, &reconstruct(p, method)?, region))
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsSummary::from_scores(method.name(), &scores, region), scores))
}

/// Mean `‖DS‖²` of the maps a model estimates on `pairs`.
pub fn mean_map_roughness(pairs: &[TrainingPair], params: &ModelParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let mut total = 0.0;
    for p in pairs {
        let (_, s, _) = spicer_reconstruct(&p.y, params)?;
        total += loss_smooth(&s);
    }
    Ok(total / pairs.len() as f64)
}

/// Grid-search the TV weight on `tuning` pairs by mean PSNR; returns the
/// winning weight and its mean PSNR.
pub fn tune_tv_tau(tuning: &[TrainingPair], base: &TvConfig, grid: &[f64]) -> Result<(f64, f64)> {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &tau in grid {
        let (summary, _) = evaluate(tuning, &Method::Tv(TvConfig { tau, ..*base }), Region::Fov)?;
        if summary.psnr_mean > best.1 {
            best = (tau, summary.psnr_mean);
        }
    }
    if best.0.is_nan() {
        return Err(Error::invalid("empty TV weight grid"));
    }
    Ok(best)
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}
