use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use safectx::env::{logistic_generator, simulate_episode, DEFAULT_CHIRP};
use safectx::identify::{mmd_squared, mmd_squared_unbiased};
use safectx::kernel::gram;
use safectx::safeopt::{linear_grid, SafeOptConfig};
use safectx::{ClassifierModel, KernelSpec, ObjectiveObservation, SafeOptState};

fn points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

fn bench_gram(c: &mut Criterion) {
    let k = KernelSpec::gaussian(0.5, 1.0).unwrap();
    let mut g = c.benchmark_group("gram");
    for n in [100, 400] {
        let x = points(n, 4, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| gram(&k, black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn bench_classifier(c: &mut Criterion) {
    let (data, _) = logistic_generator(0);
    let k = KernelSpec::gaussian(1.0, 1.0).unwrap();
    c.bench_function("classifier_fit_150", |b| {
        b.iter(|| ClassifierModel::fit(black_box(&data), k, 1e-3, 2.0).unwrap())
    });
    let model = ClassifierModel::fit(&data, k, 1e-3, 2.0).unwrap();
    c.bench_function("classifier_bound", |b| {
        b.iter(|| model.total_bound(black_box(&[0.5]), 0.1, 0.05).unwrap())
    });
}

fn bench_mmd(c: &mut Criterion) {
    let k = KernelSpec::gaussian(1.0, 1.0).unwrap();
    let x = points(50, 4, 2);
    let y = points(50, 4, 3);
    c.bench_function("mmd_biased_50", |b| {
        b.iter(|| mmd_squared(black_box(&x), &y, &k).unwrap())
    });
    c.bench_function("mmd_unbiased_50", |b| {
        b.iter(|| mmd_squared_unbiased(black_box(&x), &y, &k).unwrap())
    });
}

fn bench_safeopt(c: &mut Criterion) {
    let grid = linear_grid(0.0, 1.0, 101);
    let mut state = SafeOptState::new(grid, &[vec![0.7]], 1, SafeOptConfig::default()).unwrap();
    for i in 0..30 {
        let a = 0.4 + 0.01 * i as f64;
        state
            .observe(ObjectiveObservation {
                a: vec![a],
                c: i % 3,
                f_meas: a,
                g_meas: vec![1.0 - (a - 0.6).powi(2)],
            })
            .unwrap();
    }
    c.bench_function("safeopt_update_sets", |b| {
        b.iter(|| {
            let mut s = state.clone();
            s.update_sets(0).unwrap();
            s.propose_index(0)
        })
    });
}

fn bench_episode(c: &mut Criterion) {
    let d = safectx::env::default_pendulum_contexts();
    c.bench_function("pendulum_episode_2500", |b| {
        b.iter(|| simulate_episode(&d, 1, black_box(&[0.7]), 2500, DEFAULT_CHIRP, 0).unwrap())
    });
}

criterion_group!(
    benches,
    bench_gram,
    bench_classifier,
    bench_mmd,
    bench_safeopt,
    bench_episode
);
criterion_main!(benches);
