//! Compares the fan-out path (`par_map`, rayon when the `parallel` feature is
//! on) against the always-sequential reference (`seq_map`) on the two hot
//! loops: per-sample effective-weight composition and normalized Gram rows.
//!
//! Run `cargo bench` for the rayon build and
//! `cargo bench --no-default-features` for the sequential build; the two
//! should produce identical outputs and the timings show what the thread pool
//! buys on this machine.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use efflens::effweight::{compose, flatten};
use efflens::linalg::dot;
use efflens::network::{forward, init_model, MlpModel, REFERENCE_DIMS};
use efflens::parallel::{par_map, seq_map};
use efflens::rng::SplitMix64;

fn random_samples(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.next_range(0.0, 1.0) as f32).collect())
        .collect()
}

fn effective_weight_of(model: &MlpModel<f32>, x: &[f32]) -> Vec<f32> {
    let r = forward(model, x).unwrap();
    let eff = compose(model, &r.trace, 0, 0).unwrap();
    flatten(&eff).values
}

fn bench_effective_weights(c: &mut Criterion) {
    let model: MlpModel<f32> = init_model(&REFERENCE_DIMS, 7).unwrap();
    let mut group = c.benchmark_group("batch_effective_weights");
    for &n in &[32usize, 128] {
        let samples = random_samples(n, REFERENCE_DIMS[0], 42);
        group.bench_with_input(BenchmarkId::new("par_map", n), &samples, |b, s| {
            b.iter(|| par_map(s.len(), |i| effective_weight_of(&model, &s[i])))
        });
        group.bench_with_input(BenchmarkId::new("seq_map", n), &samples, |b, s| {
            b.iter(|| seq_map(s.len(), |i| effective_weight_of(&model, &s[i])))
        });
    }
    group.finish();
}

fn bench_gram_rows(c: &mut Criterion) {
    let n = 256usize;
    let dim = 320usize;
    let rows = random_samples(n, dim, 9);
    let normalized: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| {
            let norm = dot(r, r).sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let gram_row = |i: usize| -> Vec<f32> {
        (0..normalized.len())
            .map(|j| dot(&normalized[i], &normalized[j]))
            .collect()
    };
    let mut group = c.benchmark_group("gram_rows");
    group.bench_function("par_map", |b| b.iter(|| par_map(n, gram_row)));
    group.bench_function("seq_map", |b| b.iter(|| seq_map(n, gram_row)));
    group.finish();
}

criterion_group!(benches, bench_effective_weights, bench_gram_rows);
criterion_main!(benches);
