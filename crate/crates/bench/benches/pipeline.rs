use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use get_bench::{benchmark_pair, gaussian_like, skewed_posterior};
use get_core::generative::prototype_posterior;
use get_core::harness::presets;
use get_core::network::Network;
use get_core::numerics::Simplex;
use get_core::regularizer::auxiliary_distribution;
use get_core::trainer::{train, TrainConfig};
use get_core::Method;
use std::hint::black_box;

fn auxiliary(c: &mut Criterion) {
    let mut group = c.benchmark_group("auxiliary_distribution");
    for n in [64, 512, 4096] {
        let p = skewed_posterior(n, 6, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| b.iter(|| auxiliary_distribution(black_box(p))));
    }
    group.finish();
}

fn posterior(c: &mut Criterion) {
    let features = gaussian_like(512, 32, 2);
    let prototypes = gaussian_like(6, 32, 3);
    let prior = Simplex::uniform(6);
    c.bench_function("prototype_posterior 512x32", |b| {
        b.iter(|| prototype_posterior(black_box(features.view()), prototypes.view(), &prior, 1.0).unwrap())
    });
}

fn forward_backward(c: &mut Criterion) {
    let mut net = Network::new(16, &[64, 32], 6, 4).unwrap();
    let x = gaussian_like(64, 16, 5);
    c.bench_function("forward+backward batch 64", |b| {
        b.iter(|| {
            let (_, logits) = net.forward(black_box(x.view())).unwrap();
            net.backward(logits.view(), None).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let pair = benchmark_pair(0);
    let mut group = c.benchmark_group("train 2 epochs");
    group.sample_size(10);
    for method in [Method::Get, Method::Nc, Method::Pl, Method::SourceOnly] {
        let cfg = TrainConfig {
            method,
            epochs: 2,
            ..presets::imbalanced_uda().train
        };
        group.bench_function(method.name(), |b| b.iter(|| train(black_box(&cfg), &pair).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, auxiliary, posterior, forward_backward, training);
criterion_main!(benches);
