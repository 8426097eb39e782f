use bsde_core::lsmc::DriverKind;
use bsde_core::*;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn setup(samples: usize) -> (LqProblem, TimeGrid, ControlLaw, TrajectoryBatch) {
    let prob = builtin_2d();
    let grid = TimeGrid::new(prob.horizon(), 0.02).unwrap();
    let law = ControlLaw::zero(&prob, &grid);
    let batch = simulate_forward(&prob, &law, samples, &grid, 1).unwrap();
    (prob, grid, law, batch)
}

fn forward(c: &mut Criterion) {
    let (prob, grid, law, _) = setup(1);
    let mut group = c.benchmark_group("simulate_forward");
    for n in [500, 2000] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| simulate_forward(&prob, &law, n, &grid, 7).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let (prob, _, law, batch) = setup(2000);
    let scores = fit_scores(&batch, prob.diffusion(), Jitter::None).unwrap();
    let mut group = c.benchmark_group("backward_2d_n2000");
    group.sample_size(20);
    for kind in [DriverKind::Value, DriverKind::Costate] {
        group.bench_function(format!("lsmc_{kind}"), |b| {
            b.iter(|| lsmc_solve(&prob, &law, &batch, kind).unwrap())
        });
        group.bench_function(format!("tr_{kind}"), |b| {
            b.iter(|| tr_solve(&prob, &law, &batch, &scores, kind, 3).unwrap())
        });
    }
    group.bench_function("fit_scores", |b| {
        b.iter(|| fit_scores(&batch, prob.diffusion(), Jitter::None).unwrap())
    });
    group.finish();
}

fn regression(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_quadratic_n1000");
    for p in [1, 5, 10] {
        let prob = mass_spring(p).unwrap();
        let grid = TimeGrid::new(prob.horizon(), 0.02).unwrap();
        let law = ControlLaw::zero(&prob, &grid);
        let batch = simulate_forward(&prob, &law, 1000, &grid, 2).unwrap();
        let xs = batch.snapshot(100);
        let ys = DVector::from_fn(1000, |i, _| xs.row(i).norm_squared());
        group.bench_with_input(BenchmarkId::new("dim", 2 * p), &p, |b, _| {
            b.iter(|| fit_quadratic(&xs, &ys).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let prob = mass_spring(10).unwrap();
    let grid = TimeGrid::new(prob.horizon(), 0.02).unwrap();
    c.bench_function("riccati_n20", |b| {
        b.iter(|| solve_riccati(&prob, &grid, 20).unwrap())
    });
}

fn policy_iteration(c: &mut Criterion) {
    let prob = builtin_2d();
    let grid = TimeGrid::new(prob.horizon(), 0.02).unwrap();
    let mut group = c.benchmark_group("policy_iteration_2d_3iters");
    group.sample_size(10);
    for method in Method::ALL {
        let cfg = PolicyConfig::new(1000, grid.clone(), 3, 5);
        group.bench_function(method.label(), |b| {
            b.iter(|| run_policy_iteration(&prob, method, &cfg, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    forward,
    backward,
    regression,
    oracle,
    policy_iteration
);
criterion_main!(benches);
