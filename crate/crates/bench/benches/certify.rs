use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use psrl_bench::random_policy;
use psrl_core::bounds::{crown_ibp_bounds, ibp_bounds};
use psrl_core::env::{self, ScenarioPreset};
use psrl_core::policy::{cert_action_set, robust_epsilon_scan};
use psrl_core::smoothing::SmoothedSamples;
use psrl_core::tasc::{certify, EpsGrid};
use psrl_core::{BoxBounds, CertConfig, SmoothingConfig};

fn bounds(c: &mut Criterion) {
    let preset = ScenarioPreset::highway();
    let p = random_policy(&preset, 1);
    let o = env::observe(&preset, &env::reset(&preset, 3));
    let input = BoxBounds::around_clipped(&o, 2.0 / 255.0, 0.0, 1.0).unwrap();
    c.bench_function("ibp g", |b| b.iter(|| ibp_bounds(&p.g, black_box(&input)).unwrap()));
    c.bench_function("crown∩ibp g", |b| b.iter(|| crown_ibp_bounds(&p.g, black_box(&input)).unwrap()));
    c.bench_function("smoothing samples n=2000", |b| {
        b.iter(|| SmoothedSamples::new(&p.g, black_box(&o), &SmoothingConfig::default()).unwrap())
    });
}

fn scan(c: &mut Criterion) {
    let preset = ScenarioPreset::highway();
    let p = random_policy(&preset, 2);
    let o = env::observe(&preset, &env::reset(&preset, 4));
    let nominal = cert_action_set(&p, &o, 0.0, &CertConfig::linf()).unwrap();
    c.bench_function("robust epsilon scan", |b| {
        b.iter(|| robust_epsilon_scan(&p, black_box(&o), nominal, &CertConfig::linf(), 255, 0).unwrap())
    });
}

fn tree(c: &mut Criterion) {
    let preset = ScenarioPreset::highway();
    let p = random_policy(&preset, 5);
    let mut group = c.benchmark_group("tasc");
    group.sample_size(10);
    for tv in [3usize, 5] {
        group.bench_function(format!("certify tv={tv}"), |b| {
            b.iter_batched(
                || env::reset(&preset, 6),
                |s0| certify(&p, &CertConfig::linf(), &preset, s0, tv, EpsGrid::linf(), 500).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bounds, scan, tree);
criterion_main!(benches);
