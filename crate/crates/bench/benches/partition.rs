use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use covloss::baselines::{epsnet_partition, kmeans_partition};
use covloss::{build_partition, covariance_loss, pin_partition, GeneralConfig, PinningConfig};
use covloss_bench::{boolean, sphere};

fn general(c: &mut Criterion) {
    let dist = sphere(2048, 32, 1);
    let mut group = c.benchmark_group("general");
    group.sample_size(10);
    for k in [8, 64, 512] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| build_partition(black_box(&dist), &GeneralConfig::new(k, 3)).unwrap())
        });
    }
    group.finish();
}

fn pinning(c: &mut Criterion) {
    let dist = boolean(2048, 32, 2);
    let mut group = c.benchmark_group("pinning");
    for k in [8, 64, 512] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| pin_partition(black_box(&dist), &PinningConfig::new(k, 3)).unwrap())
        });
    }
    group.finish();
}

fn baselines(c: &mut Criterion) {
    let dist = sphere(2048, 32, 1);
    let mut group = c.benchmark_group("baselines");
    group.sample_size(10);
    group.bench_function("epsnet/512", |b| {
        b.iter(|| epsnet_partition(black_box(&dist), 512).unwrap())
    });
    group.bench_function("kmeans/64", |b| {
        b.iter(|| kmeans_partition(black_box(&dist), 64, 0, 20).unwrap())
    });
    group.finish();
}

fn loss(c: &mut Criterion) {
    let dist = sphere(2048, 32, 1);
    let part = build_partition(&dist, &GeneralConfig::new(64, 3)).unwrap().partition;
    c.bench_function("covariance_loss/2048x32", |b| {
        b.iter(|| covariance_loss(black_box(&dist), &part, &[]).unwrap())
    });
}

criterion_group!(benches, general, pinning, baselines, loss);
criterion_main!(benches);
