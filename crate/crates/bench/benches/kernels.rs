use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;

use comoe_bench::{layer, random_tensor};
use comoe_core::adapters::ForwardMode;
use comoe_core::autograd as ag;
use comoe_core::contrastive::{self, ContrastiveConfig};
use comoe_core::migap::{infonce_estimate, infonce_exact, GapScenario};
use comoe_core::SeededRng;

fn moe_forward(c: &mut Criterion) {
    let layer = layer(64, 1);
    let mut rng = SeededRng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[16, 64]);
    let mut group = c.benchmark_group("moe_forward");
    for need_all in [false, true] {
        let label = if need_all { "all_experts" } else { "routed" };
        group.bench_function(label, |b| {
            b.iter(|| layer.forward(black_box(&x), ForwardMode::eval(need_all)).unwrap())
        });
    }
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let out = layer.forward(black_box(&x), ForwardMode::eval(false)).unwrap();
            ag::sum(&out.y).backward().unwrap();
        })
    });
    group.finish();
}

fn contrastive_loss(c: &mut Criterion) {
    let layer = layer(64, 3);
    let mut rng = SeededRng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[16, 64]);
    let out = layer.forward(&x, ForwardMode::eval(true)).unwrap();
    let cfg = ContrastiveConfig::default();
    c.bench_function("contrastive_layer_loss", |b| {
        b.iter(|| {
            let mut anchor = SeededRng::seed_from_u64(5);
            contrastive::layer_loss(black_box(&out), &cfg, &mut anchor).unwrap()
        })
    });
}

fn infonce(c: &mut Criterion) {
    let s = GapScenario::deterministic_vs_independent(4);
    let mut group = c.benchmark_group("infonce");
    for n in [4, 16, 64] {
        group.bench_with_input(BenchmarkId::new("exact", n), &n, |b, &n| {
            b.iter(|| infonce_exact(black_box(&s), n).unwrap())
        });
    }
    let mut rng = SeededRng::seed_from_u64(6);
    let random = GapScenario::random("bench", 6, 6, 6, &mut rng);
    group.bench_function("monte_carlo_n16_2000", |b| {
        b.iter(|| infonce_estimate(black_box(&random), 16, 2000, 7).unwrap())
    });
    group.finish();
}

criterion_group!(benches, moe_forward, contrastive_loss, infonce);
criterion_main!(benches);
