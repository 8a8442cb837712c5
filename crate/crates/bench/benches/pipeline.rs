use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mpi_bench::{problem, scene};
use mpi_core::{loss_and_gradients, render_view, ssim, LossConfig, Parallelism};
use std::hint::black_box;

fn render(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_view");
    for planes in [8, 32] {
        let s = scene(128, planes);
        let target = s.held_out.camera.clone();
        group.bench_with_input(BenchmarkId::from_parameter(planes), &planes, |b, _| {
            b.iter(|| render_view(black_box(&s.ground_truth), black_box(&target), 1.0).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_gradients");
    group.sample_size(20);
    let s = scene(128, 16);
    let (params, prob) = problem(&s, 16);
    let config = LossConfig::default();
    for (name, mode) in [("serial", Parallelism::Serial), ("parallel", Parallelism::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| loss_and_gradients(black_box(&params), black_box(&prob), &config, mode).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let s = scene(128, 8);
    let (a, b) = (&s.frames[0].image, &s.frames[1].image);
    c.bench_function("ssim_128", |bench| bench.iter(|| ssim(black_box(a), black_box(b), None, 0.6).unwrap()));
}

criterion_group!(benches, render, gradients, metrics);
criterion_main!(benches);
