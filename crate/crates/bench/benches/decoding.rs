use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visref_core::toy::{build_scene, toy_backend, BiasProfile, ObjectInventory};
use visref_core::{
    build_subset, decode, log_softmax, precompute_cache, restrict, select, DecodingConfig,
    LayerScope, LogitVector, SelectionPolicy, VisionLogitCache,
};

fn logits(rng: &mut ChaCha8Rng, n: usize) -> LogitVector {
    LogitVector::full((0..n).map(|_| rng.random_range(-8.0..8.0)).collect()).unwrap()
}

fn bench_log_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("log_softmax");
    for n in [256, 32_000] {
        let v = logits(&mut rng, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &v, |b, v| {
            b.iter(|| log_softmax(black_box(v)).unwrap())
        });
    }
    g.finish();
}

fn bench_select(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (layers, tokens, vocab) = (16, 576, 4096);
    let data: Vec<f32> = (0..layers * tokens * vocab)
        .map(|_| rng.random_range(-8.0f32..8.0))
        .collect();
    let cache =
        VisionLogitCache::from_raw((1..=layers as u32).collect(), tokens, vocab, data).unwrap();
    let full = logits(&mut rng, vocab);
    let probs = log_softmax(&full).unwrap();
    let mut g = c.benchmark_group("select_min_jsd");
    g.sample_size(10);
    for alpha in [1e-1, 1e-3] {
        let subset = build_subset(&probs, alpha).unwrap();
        let base = log_softmax(&restrict(&full, &subset).unwrap()).unwrap();
        g.bench_with_input(BenchmarkId::new("alpha", alpha), &subset, |b, s| {
            b.iter(|| select(&base, &cache, s, &SelectionPolicy::default(), 0, false).unwrap())
        });
    }
    g.finish();
}

fn bench_toy_decode(c: &mut Criterion) {
    let inv = Arc::new(ObjectInventory::default());
    let scene = build_scene(&inv, 5, 3, 32).unwrap();
    let backend = toy_backend(inv.clone(), scene, &BiasProfile::uniform(&inv, 1.5)).unwrap();
    let cache = precompute_cache(&backend, &LayerScope::AllEven).unwrap();
    let mut g = c.benchmark_group("toy_decode");
    g.bench_function("greedy", |b| {
        b.iter(|| decode(&backend, &DecodingConfig::greedy()).unwrap())
    });
    g.bench_function("revisit", |b| {
        b.iter(|| decode(&backend, &DecodingConfig::default()).unwrap())
    });
    g.bench_function("revisit_precomputed_cache", |b| {
        b.iter(|| {
            visref_core::decode_with_cache(&backend, &cache, &DecodingConfig::default()).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_log_softmax, bench_select, bench_toy_decode);
criterion_main!(benches);
