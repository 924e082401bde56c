//! Experiment settings: a flat `key = value` file overlaid by command-line
//! flags. Flags win over the file, the file wins over defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use spicer_core::experiment::SimulationConfig;
use spicer_core::metrics::Region;
use spicer_core::{PhantomKind, Precision, TrainConfig, TvConfig};

use crate::CliError;

/// Every setting is optional here; unset keys fall back to the file and then
/// to defaults. The same struct parses the config file, so file keys are the
/// flag names with dashes replaced by underscores.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Image height (phase-encode rows).
    #[arg(long = "h", alias = "height")]
    #[serde(alias = "h")]
    pub height: Option<usize>,
    /// Image width (readout); defaults to the height.
    #[arg(long = "w", alias = "width")]
    #[serde(alias = "w")]
    pub width: Option<usize>,
    /// Number of receive coils.
    #[arg(long = "nc", alias = "n-coils")]
    #[serde(alias = "nc")]
    pub n_coils: Option<usize>,
    /// Acceleration factor R.
    #[arg(long = "r", alias = "accel")]
    #[serde(alias = "r")]
    pub accel: Option<f64>,
    /// Number of ACS lines.
    #[arg(long)]
    pub acs: Option<usize>,
    /// Noise standard deviation per complex sample; "default" scales it to
    /// 1% of the peak k-space magnitude of each object.
    #[arg(long)]
    pub noise: Option<NoiseSetting>,
    #[arg(long)]
    pub phantom: Option<PhantomSetting>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,

    /// Unrolled steps K.
    #[arg(long = "k", alias = "steps")]
    #[serde(alias = "K", alias = "k")]
    pub steps: Option<usize>,
    /// Weight of the coil-map smoothness term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epoch at which the learning rate drops tenfold (default: half the epochs).
    #[arg(long)]
    pub lr_drop_epoch: Option<usize>,
    #[arg(long)]
    pub denoiser_width: Option<usize>,
    #[arg(long)]
    pub csm_width: Option<usize>,
    /// Use squared norms in the cross-prediction loss.
    #[arg(long)]
    pub squared_loss: Option<bool>,
    /// Keep the calibration network at the ratio estimator.
    #[arg(long)]
    pub freeze_csm: Option<bool>,
    #[arg(long)]
    pub shared_denoiser: Option<bool>,

    #[arg(long)]
    pub tv_tau: Option<f64>,
    #[arg(long)]
    pub tv_iters: Option<usize>,
    #[arg(long)]
    pub tv_prox_iters: Option<usize>,
    #[arg(long)]
    pub grappa_ridge: Option<f64>,
    /// Metric region: fov or full.
    #[arg(long)]
    pub region: Option<RegionSetting>,

    /// Training dataset (default: <out>/train.spcr).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Held-out dataset (default: <out>/test.spcr).
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Model checkpoint (default: <out>/model.spck).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum NoiseSetting {
    Sigma(f64),
    #[serde(deserialize_with = "default_keyword")]
    Default,
}

fn default_keyword<'de, D: serde::Deserializer<'de>>(d: D) -> Result<(), D::Error> {
    let s = String::deserialize(d)?;
    if s == "default" {
        Ok(())
    } else {
        Err(serde::de::Error::custom(format!("expected a number or \"default\", got {s:?}")))
    }
}

impl std::str::FromStr for NoiseSetting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "default" {
            return Ok(NoiseSetting::Default);
        }
        s.parse::<f64>()
            .map(NoiseSetting::Sigma)
            .map_err(|_| format!("expected a number or \"default\", got {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PhantomSetting {
    SheppLogan,
    SmoothRandom,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RegionSetting {
    Fov,
    Full,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {}", path.display(), e.message())))
    }

    /// `self` where set, otherwise `base`.
    pub fn over(self, base: Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(
            height, width, n_coils, accel, acs, noise, phantom, n_train, n_test, steps, lambda, epochs, batch_size, lr,
            lr_drop_epoch, denoiser_width, csm_width, squared_loss, freeze_csm, shared_denoiser, tv_tau, tv_iters,
            tv_prox_iters, grappa_ridge, region, train_data, test_data, checkpoint
        )
    }
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
    pub simulation: SimulationConfig,
    pub training: TrainConfig,
    pub tv: TvConfig,
    pub grappa_ridge: f64,
    pub region: Region,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub checkpoint: PathBuf,
}

impl ExperimentConfig {
    pub fn resolve(s: Settings, seed: Option<u64>, out: Option<PathBuf>, precision: Option<Precision>) -> Result<Self, CliError> {
        let seed = seed.unwrap_or(0);
        let out = out.unwrap_or_else(|| PathBuf::from("out"));
        let precision = precision.unwrap_or(Precision::F64);

        let sim_default = SimulationConfig::default();
        let height = s.height.unwrap_or(sim_default.height);
        let simulation = SimulationConfig {
            n_train: s.n_train.unwrap_or(sim_default.n_train),
            n_test: s.n_test.unwrap_or(sim_default.n_test),
            height,
            width: s.width.unwrap_or(height),
            n_coils: s.n_coils.unwrap_or(sim_default.n_coils),
            accel: s.accel.unwrap_or(sim_default.accel),
            acs_count: s.acs.unwrap_or(sim_default.acs_count),
            noise_sigma: match s.noise {
                Some(NoiseSetting::Sigma(v)) => Some(v),
                Some(NoiseSetting::Default) | None => None,
            },
            phantom: match s.phantom.unwrap_or(PhantomSetting::SmoothRandom) {
                PhantomSetting::SheppLogan => PhantomKind::SheppLogan,
                PhantomSetting::SmoothRandom => PhantomKind::SmoothRandom,
            },
            seed,
        };
        simulation.validate().map_err(|e| CliError::config(e.to_string()))?;

        let train_default = TrainConfig::default();
        let epochs = s.epochs.unwrap_or(train_default.epochs);
        let lr = s.lr.unwrap_or(train_default.lr_schedule[0].1);
        let drop = s.lr_drop_epoch.unwrap_or(epochs / 2).max(1);
        let lr_schedule = if drop < epochs { vec![(0, lr), (drop, lr / 10.0)] } else { vec![(0, lr)] };
        let training = TrainConfig {
            epochs,
            batch_size: s.batch_size.unwrap_or(train_default.batch_size),
            lr_schedule,
            lambda_smooth: s.lambda.unwrap_or(train_default.lambda_smooth),
            steps: s.steps.unwrap_or(train_default.steps),
            seed,
            precision,
            denoiser_width: s.denoiser_width.unwrap_or(train_default.denoiser_width),
            csm_width: s.csm_width.unwrap_or(train_default.csm_width),
            shared_denoiser: s.shared_denoiser.unwrap_or(false),
            squared_loss: s.squared_loss.unwrap_or(train_default.squared_loss),
            freeze_csm: s.freeze_csm.unwrap_or(false),
            ..train_default
        };
        training.validate().map_err(|e| CliError::config(e.to_string()))?;
        if !(1..=spicer_core::unroll::MAX_STEPS).contains(&training.steps) {
            return Err(CliError::config(format!(
                "K must lie in [1, {}], got {}",
                spicer_core::unroll::MAX_STEPS,
                training.steps
            )));
        }
        if training.denoiser_width == 0 || training.csm_width == 0 {
            return Err(CliError::config("channel widths must be positive"));
        }

        let tv_default = TvConfig::default();
        let tv = TvConfig {
            tau: s.tv_tau.unwrap_or(tv_default.tau),
            outer_iters: s.tv_iters.unwrap_or(tv_default.outer_iters),
            prox_iters: s.tv_prox_iters.unwrap_or(tv_default.prox_iters),
            ..tv_default
        };
        if !(tv.tau > 0.0 && tv.tau.is_finite()) || tv.outer_iters == 0 || tv.prox_iters == 0 {
            return Err(CliError::config("TV weight and iteration counts must be positive"));
        }
        let grappa_ridge = s.grappa_ridge.unwrap_or(spicer_core::experiment::GRAPPA_RIDGE);
        if !(grappa_ridge >= 0.0 && grappa_ridge.is_finite()) {
            return Err(CliError::config("GRAPPA ridge must be finite and non-negative"));
        }
        let region = match s.region.unwrap_or(RegionSetting::Fov) {
            RegionSetting::Fov => Region::Fov,
            RegionSetting::Full => Region::Full,
        };

        Ok(Self {
            train_data: s.train_data.unwrap_or_else(|| out.join("train.spcr")),
            test_data: s.test_data.unwrap_or_else(|| out.join("test.spcr")),
            checkpoint: s.checkpoint.unwrap_or_else(|| out.join("model.spck")),
            seed,
            out,
            precision,
            simulation,
            training,
            tv,
            grappa_ridge,
            region,
        })
    }
}

/// Fail before any compute when an input the command needs is missing.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} {} does not exist", path.display())))
    }
}
