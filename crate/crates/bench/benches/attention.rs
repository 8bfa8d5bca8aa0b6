//! Per-operator attention cost: softmax against the Sinkhorn-backed and
//! degenerate (identity, blurred, uniform) variants.

use criterion::{criterion_group, criterion_main, Criterion};
use sinkhorn_guidance::attention::{apply, AttentionBatch, AttentionMode};
use sinkhorn_guidance::Rng;
use std::hint::black_box;

fn batch(heads: usize, n: usize, d: usize, seed: u64) -> AttentionBatch {
    let mut rng = Rng::new(seed);
    AttentionBatch::new(
        rng.gaussian(vec![heads, n, d]),
        rng.gaussian(vec![heads, n, d]),
        rng.gaussian(vec![heads, n, d]),
    )
    .unwrap()
}

fn bench_operators(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_operators");
    let b = batch(2, 16, 8, 3);
    let modes = [
        ("softmax", AttentionMode::Softmax),
        ("sinkhorn_similarity", AttentionMode::sinkhorn_similarity()),
        ("adversarial_sinkhorn", AttentionMode::asa()),
        ("identity", AttentionMode::Identity),
        ("blurred", AttentionMode::Blurred { sigma: 8.0 }),
        ("uniform", AttentionMode::Uniform),
    ];
    for (name, mode) in modes {
        group.bench_function(name, |bch| {
            bch.iter(|| apply(black_box(&b), &mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_operators);
criterion_main!(benches);
