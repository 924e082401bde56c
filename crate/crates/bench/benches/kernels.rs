use criterion::{black_box, criterion_group, criterion_main, Criterion};
use spicer_core::csm::DEFAULT_FOV_THRESHOLD;
use spicer_core::training::{total_loss_and_grad, LossOptions};
use spicer_core::{
    adjoint, estimate_csm_classical, fft2c, forward, simulate_split, spicer_reconstruct, ForwardModel, ModelParams, ModelSpec,
    RandomStream, SimulationConfig,
};

fn desk_pair() -> spicer_core::TrainingPair {
    let cfg = SimulationConfig { n_train: 1, n_test: 0, ..SimulationConfig::default() };
    simulate_split(&cfg).unwrap().0.remove(0)
}

fn model(width: usize) -> ModelParams {
    let spec = ModelSpec { denoiser_width: width, csm_width: width, ..ModelSpec::new(4, 4) };
    ModelParams::init(spec, &mut RandomStream::new(0)).unwrap()
}

fn numerics(c: &mut Criterion) {
    let pair = desk_pair();
    let x = pair.ground_truth().unwrap().clone();
    c.bench_function("fft2c 64x64", |b| b.iter(|| fft2c(black_box(&x))));
}

fn operators(c: &mut Criterion) {
    let pair = desk_pair();
    let x = pair.ground_truth().unwrap().clone();
    let csm = estimate_csm_classical(&pair.y, DEFAULT_FOV_THRESHOLD).unwrap();
    let a = ForwardModel::new(csm, pair.y.mask().clone()).unwrap();
    c.bench_function("forward 4x64x64", |b| b.iter(|| forward(black_box(&x), &a).unwrap()));
    c.bench_function("adjoint 4x64x64", |b| b.iter(|| adjoint(black_box(&pair.y), &a).unwrap()));
    c.bench_function("classical csm 4x64x64", |b| b.iter(|| estimate_csm_classical(black_box(&pair.y), DEFAULT_FOV_THRESHOLD).unwrap()));
}

fn network(c: &mut Criterion) {
    let pair = desk_pair();
    let mut g = c.benchmark_group("unroll K=4");
    g.sample_size(10);
    for width in [8, 16] {
        let params = model(width);
        g.bench_function(format!("reconstruct width {width}"), |b| {
            b.iter(|| spicer_reconstruct(black_box(&pair.y), &params).unwrap())
        });
        let opts = LossOptions { lambda_smooth: 0.01, squared: false };
        g.bench_function(format!("loss and gradient width {width}"), |b| {
            b.iter(|| total_loss_and_grad(black_box(&pair), &params, &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, numerics, operators, network);
criterion_main!(benches);
