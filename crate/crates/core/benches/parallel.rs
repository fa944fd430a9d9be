//! Single worker versus the default pool on the data-parallel kernels.
//!
//! Built without the `parallel` feature both variants run the sequential
//! fallback, so the pair doubles as an overhead check.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pgs_core::geometry::build_knn;
use pgs_core::learn::{mean_shift_sampled, MeanShiftConfig};
use pgs_core::par;
use pgs_core::renderer::{render_primitives, RenderSettings};
use pgs_core::synth::{generate_scene, SynthConfig};

fn scene() -> pgs_core::Scene {
    let cfg = SynthConfig {
        gaussians_per_m2: 200.0,
        views: 8,
        seed: 3,
        ..SynthConfig::default()
    };
    generate_scene(&cfg).expect("synthetic scene")
}

fn variants() -> [(&'static str, Option<usize>); 2] {
    [("1-thread", Some(1)), ("default", None)]
}

fn bench_render(c: &mut Criterion) {
    let scene = scene();
    let settings = RenderSettings::default();
    let mut group = c.benchmark_group("render");
    group.sample_size(10);
    for (name, threads) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || render_primitives(&scene.primitives, &scene.views[0], &settings, true)))
        });
    }
    group.finish();
}

fn bench_knn(c: &mut Criterion) {
    let centers = scene().centers();
    let mut group = c.benchmark_group("knn");
    group.sample_size(10);
    for (name, threads) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || build_knn(&centers, 30, 0).expect("knn")))
        });
    }
    group.finish();
}

fn bench_mean_shift(c: &mut Criterion) {
    let scene = scene();
    let knn = build_knn(&scene.centers(), 30, 0).expect("knn");
    let z = pgs_core::learn::descriptor_matrix(&scene.primitives);
    let k = scene.descriptor_dim();
    let cfg = MeanShiftConfig {
        steps: 2,
        ..MeanShiftConfig::default()
    };
    let mut group = c.benchmark_group("mean_shift_sampled");
    group.sample_size(10);
    for (name, threads) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || mean_shift_sampled(&z, k, &knn.neighbors, &cfg, 11)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_knn, bench_mean_shift);
criterion_main!(benches);
