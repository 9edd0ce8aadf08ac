//! Benchmarks of the numerical kernels behind the controller.

use criterion::{BenchmarkId, Criterion};
use kdpc_core::datapipe::{build_hankels, HankelSet};
use kdpc_core::multisine::{multisine, MultisineSpec};
use kdpc_core::numerics::{solve_dare, solve_qp, QpProblem};
use kdpc_core::observables::{train_multistep, Architecture, TrainConfig};
use kdpc_core::plants::{simulate, CartSpringDamper};
use kdpc_core::terminal::{compute_terminal, BoxSet, TerminalOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Dense QP shaped like the condensed controller problem: `n` variables,
/// a box and `extra` general rows.
pub fn qp_fixture(n: usize, extra: usize, seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random(&mut rng, n, n);
    let h = g.transpose() * &g + DMatrix::identity(n, n);
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let bx = BoxSet::symmetric(n, 1.0).to_polyhedron();
    let mut a = DMatrix::zeros(2 * n + extra, n);
    a.rows_mut(0, 2 * n).copy_from(&bx.m);
    a.rows_mut(2 * n, extra).copy_from(&random(&mut rng, extra, n));
    let b = DVector::from_fn(2 * n + extra, |i, _| if i < 2 * n { 1.0 } else { rng.gen_range(0.2..1.0) });
    QpProblem::new(h, f, a, b).unwrap()
}

/// Stable-ish random `(A, B)` of size `l x l`, `l x 1`.
pub fn system_fixture(l: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, l, l) * (0.9 / l as f64).sqrt();
    let b = random(&mut rng, l, 1);
    (a, b)
}

/// Training Hankel data of the cart benchmark.
pub fn csd_hankels() -> HankelSet {
    let sig = multisine(&MultisineSpec::default()).unwrap();
    let u: Vec<DVector<f64>> = sig.samples.iter().map(|&v| DVector::from_element(1, v)).collect();
    let traj = simulate(&CartSpringDamper::default(), &DVector::zeros(2), &u).unwrap();
    build_hankels(&traj.aligned(), None, 5, 15).unwrap()
}

pub fn benchmarks(c: &mut Criterion) {
    let mut group = c.benchmark_group("qp");
    for n in [8usize, 16, 31] {
        let p = qp_fixture(n, 2 * n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| b.iter(|| solve_qp(p, 1e-8, 20_000).unwrap()));
    }
    group.finish();

    let mut group = c.benchmark_group("dare");
    for l in [4usize, 13, 24] {
        let (a, bm) = system_fixture(l, 2);
        let q = DMatrix::identity(l, l) * 10.0;
        let r = DMatrix::identity(1, 1);
        group.bench_with_input(BenchmarkId::from_parameter(l), &(a, bm), |b, (a, bm)| {
            b.iter(|| solve_dare(a, bm, &q, &r).unwrap())
        });
    }
    group.finish();

    let h = csd_hankels();
    let arch = Architecture { hidden: vec![8, 8], pass_through: true };
    let cfg = TrainConfig { epochs: 10, refit_heads: false, ..Default::default() };
    c.bench_function("train/csd_10_epochs", |b| b.iter(|| train_multistep(&h, &arch, &cfg).unwrap()));

    let mut group = c.benchmark_group("terminal");
    group.sample_size(10);
    for l in [2usize, 4, 6] {
        let (a, bm) = system_fixture(l, 3);
        let q = DMatrix::identity(l, l) * 10.0;
        let r = DMatrix::identity(1, 1);
        let xz = BoxSet::symmetric(l, 2.0);
        let u_box = BoxSet::symmetric(1, 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(l), &(a, bm), |b, (a, bm)| {
            b.iter(|| compute_terminal(a, bm, &q, &r, &xz, &u_box, &TerminalOptions::default()).unwrap())
        });
    }
    group.finish();
}
