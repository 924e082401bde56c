//! Self-supervised parallel MRI reconstruction with jointly learned coil
//! sensitivity maps, plus the simulation, baseline and evaluation pieces
//! needed to train and compare it on synthetic data.

pub mod acquisition;
pub mod baselines;
pub mod csm;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod operators;
pub mod storage;
pub mod training;
pub mod unroll;

pub use acquisition::{
    default_noise_sigma, make_coil_maps, make_mask, make_phantom, make_training_pair, simulate_kspace, MaskKind,
    MultiCoilKspace, PhantomKind, SamplingMask, TrainingPair,
};
pub use csm::{estimate_csm_classical, estimate_csm_network, CoilSensitivities};
pub use error::{Error, Result};
pub use experiment::{evaluate, reconstruct, simulate_split, Method, SimulationConfig};
pub use numerics::{fft2c, ifft2c, seeded_rng, ComplexArray, ComplexImage, MultiCoilImage, RandomStream, C64};
pub use operators::{adjoint, dc_gradient, forward, ForwardModel};
pub use unroll::{spicer_reconstruct, unroll_backward, ModelGrads, ModelParams, ModelSpec};
pub use storage::{load_dataset, save_dataset, Precision, SaveOptions};
pub use training::{load_checkpoint, loss_rec, loss_smooth, save_checkpoint, total_loss, train, Checkpoint, TrainConfig};
pub use baselines::{grappa, tv_reconstruct, zero_filled_recon, TvConfig};
pub use metrics::{nmse, psnr, ssim, MetricsSummary};
