use std::hint::black_box;

use cen_bench::{exchanging_model, randn};
use cen_core::conv::conv2d_forward;
use cen_core::net::{LossConfig, Mode, Target, TaskLoss};
use cen_core::{ExchangePlan, Graph, Sgd};
use criterion::{criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let x = randn(&[6, 32, 16, 16], 1);
    let w = randn(&[32, 32, 3, 3], 2);
    let b = randn(&[32], 3);
    c.bench_function("conv2d_6x32x16x16_k3", |bench| {
        bench.iter(|| conv2d_forward(black_box(&x), &w, Some(&b), 1, 1).unwrap())
    });
}

fn exchange(c: &mut Criterion) {
    let a = randn(&[6, 32, 16, 16], 4);
    let b = randn(&[6, 32, 16, 16], 5);
    let plan = ExchangePlan::half_channel(32, 2, 2e-2).unwrap();
    let g0: Vec<f64> = (0..32).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let g1 = g0.clone();
    c.bench_function("exchange_forward_6x32x16x16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let va = g.constant(a.clone());
            let vb = g.constant(b.clone());
            cen_core::exchange::exchange_forward(&mut g, 0, &[va, vb], &[&g0, &g1], &plan).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut model = exchanging_model(32);
    let inputs = vec![randn(&[6, 3, 32, 32], 6), randn(&[6, 3, 32, 32], 7)];
    let target = Target::Labels((0..6 * 32 * 32).map(|i| i % 5).collect());
    let loss = LossConfig {
        task: TaskLoss::CrossEntropy,
        lambda: 5e-3,
        stream_weight: 0.0,
    };
    let mut opt = Sgd::new(0.01, 0.9, 1e-5);
    c.bench_function("train_step_batch6_32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &inputs, Mode::Train).unwrap();
            let parts = model.loss(&mut g, &out, &target, &loss).unwrap();
            let grads = g.backward(parts.total).unwrap();
            opt.step(&mut model.params, &grads).unwrap();
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = conv, exchange, train_step
}
criterion_main!(kernels);
