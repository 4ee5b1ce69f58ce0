use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hmlab::gint::{i4_erf, random_psd, to4, Covariance4};
use hmlab::odeflow::{eom_rhs, make_grid, FlowState, GridMode};
use hmlab::student::{sgd_step, Setup};
use hmlab::{Activation, ExperimentConfig, NetworkParams};

fn gaussian_integrals(c: &mut Criterion) {
    let phi = Covariance4(to4(&random_psd(4, 7, 0)));
    c.bench_function("i4_erf", |b| b.iter(|| i4_erf(black_box(&phi)).unwrap()));
}

fn equations_of_motion(c: &mut Criterion) {
    let cfg = ExperimentConfig { n: 4000, d: 40, init_std: 1.0, ..ExperimentConfig::default() };
    let setup = Setup::from_config(&cfg).unwrap();
    let op = setup.measure(&setup.student).unwrap();
    let mut group = c.benchmark_group("eom_rhs");
    for nodes in [50, 200] {
        let grid = make_grid(GridMode::MarchenkoPastur { delta: cfg.delta() }, nodes).unwrap();
        let state = FlowState::from_order_params(&op, grid, cfg.delta(), cfg.eta, Activation::Erf, Activation::Erf).unwrap();
        group.bench_function(format!("k2_m2_{nodes}_nodes"), |b| b.iter(|| eom_rhs(black_box(&state)).unwrap()));
    }
    group.finish();
}

fn sgd(c: &mut Criterion) {
    let n = 4000;
    let mut net = NetworkParams::random_student(2, n, 1.0, Activation::Erf, 1);
    let x: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
    c.bench_function("sgd_step_k2_n4000", |b| b.iter(|| sgd_step(&mut net, black_box(&x), 0.5, 1e-6).unwrap()));
}

criterion_group!(benches, gaussian_integrals, equations_of_motion, sgd);
criterion_main!(benches);
