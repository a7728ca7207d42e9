use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use markov_mamba::construction::{build_construction_params, verify_construction};
use markov_mamba::markov::sample_batch;
use markov_mamba::model::{batch_loss_grad, init_params, MambaConfig, Model};
use markov_mamba::par::Execution;
use markov_mamba::rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn loss_and_gradient(c: &mut Criterion) {
    let cfg = MambaConfig::full(8, 8, 2, 2);
    let params = init_params(&cfg, &mut rng::stream(0, &[])).unwrap();
    let model = Model::new(&params, &cfg).unwrap();
    let batch = sample_batch(1, 1.0, 256, 64, 1).unwrap();
    let mut group = c.benchmark_group("batch_loss_grad");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_loss_grad(&model, black_box(&batch), 1, exec).unwrap())
        });
    }
    group.finish();
}

fn certification(c: &mut Criterion) {
    let params = build_construction_params(1.0, 0.01).unwrap();
    let mut group = c.benchmark_group("verify_construction");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| verify_construction(black_box(&params), 1.0, 0.01, 12, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, loss_and_gradient, certification);
criterion_main!(benches);
