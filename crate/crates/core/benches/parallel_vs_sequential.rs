use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use std::hint::black_box;

use prism_fcp::harness::{run_trials, Exec, ExperimentConfig};
use prism_fcp::robust_calib::{
    maliciousness_scores, maliciousness_scores_seq, pairwise_distances, pairwise_distances_seq,
    CharacterizationVector,
};
use prism_fcp::seed;

fn histograms(k: usize, h: usize) -> Vec<CharacterizationVector> {
    let mut r = seed::rng(7, &[]);
    (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..h).map(|_| r.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            CharacterizationVector {
                mass: raw.into_iter().map(|x| x / s).collect(),
            }
        })
        .collect()
}

fn distances(c: &mut Criterion) {
    let mut g = c.benchmark_group("pairwise_distances");
    for k in [100, 400] {
        let vs = histograms(k, 100);
        g.bench_with_input(BenchmarkId::new("parallel", k), &vs, |b, vs| {
            b.iter(|| pairwise_distances(black_box(vs)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sequential", k), &vs, |b, vs| {
            b.iter(|| pairwise_distances_seq(black_box(vs)).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let mut g = c.benchmark_group("maliciousness_scores");
    for k in [100, 400] {
        let d = pairwise_distances(&histograms(k, 100)).unwrap();
        let k_b = k * 4 / 5;
        g.bench_with_input(BenchmarkId::new("parallel", k), &d, |b, d| {
            b.iter(|| maliciousness_scores(black_box(d), k_b).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sequential", k), &d, |b, d| {
            b.iter(|| maliciousness_scores_seq(black_box(d), k_b).unwrap())
        });
    }
    g.finish();
}

fn trials(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        n_trials: 4,
        n_train_iters: 300,
        n_calib: 300,
        n_test: 300,
        ..ExperimentConfig::default()
    };
    let mut g = c.benchmark_group("trial_batch");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| run_trials(black_box(&cfg), Exec::Parallel, false).unwrap()));
    g.bench_function("sequential", |b| {
        b.iter(|| run_trials(black_box(&cfg), Exec::Sequential, false).unwrap())
    });
    g.finish();
}

criterion_group!(benches, distances, scoring, trials);
criterion_main!(benches);
