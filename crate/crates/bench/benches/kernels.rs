use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use slungload::autodiff::Tape;
use slungload::data::{generate_synthetic, make_windows, synthetic_suite, ControllerGains, DisturbanceConfig, SequenceWindow, WindowBatch};
use slungload::dynamics::{rollout, step, ControlInput, LoadAngularVelocity, PhysicalParams, SystemState};
use slungload::loss::{total_loss, LossWeights};
use slungload::seq2seq::{Model, ModelConfig, Normalizer};
use slungload::trainer::{train_step, Adam, TrainConfig};
use slungload::Vec3;

fn physics(c: &mut Criterion) {
    let params = PhysicalParams::default();
    let x = SystemState::hover(Vec3::new(0.0, 0.0, -1.0), &params);
    let omega = LoadAngularVelocity(Vec3::new(0.1, -0.2, 0.0));
    let u = ControlInput::new(params.hover_thrust(), Vec3::new(0.05, 0.0, 0.1));
    c.bench_function("step", |b| b.iter(|| step(black_box(&x), &omega, &u, &params).unwrap()));
    let controls = vec![u; 50];
    c.bench_function("rollout_50", |b| b.iter(|| rollout(black_box(&x), &omega, &controls, &params).unwrap()));
}

fn windows(history: usize, horizon: usize) -> Vec<SequenceWindow> {
    let params = PhysicalParams::default();
    let spec = &synthetic_suite(1, (300, 300), 3)[0];
    let log = generate_synthetic(&params, &DisturbanceConfig::default(), &ControllerGains::default(), spec).unwrap();
    make_windows(&log, history, horizon, 3, &params).unwrap()
}

fn model(c: &mut Criterion) {
    let params = PhysicalParams::default();
    let weights = LossWeights::default();
    let cfg = ModelConfig::desk();
    let ws = windows(cfg.history, cfg.horizon);
    let refs: Vec<&SequenceWindow> = ws.iter().take(32).collect();
    let batch = WindowBatch::new(&refs, cfg.horizon).unwrap();
    let model = Model::new(cfg.clone(), 0).unwrap().with_normalizer(Normalizer::fit(&ws, true));

    let mut group = c.benchmark_group("desk_batch32");
    group.sample_size(10);
    group.bench_function("forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            model.bind(&tape).unwrap().predict(&batch, cfg.horizon).unwrap().states.len()
        })
    });
    group.bench_function("forward_loss_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let graph = model.bind(&tape).unwrap().predict(&batch, cfg.horizon).unwrap();
            let (total, _) = total_loss(&graph, &batch, &params, &weights).unwrap();
            tape.backward(total).unwrap().for_params(&model.params).len()
        })
    });
    let train_cfg = TrainConfig::desk();
    group.bench_function("train_step", |b| {
        b.iter_batched(
            || (model.clone(), Adam::new(&model.params)),
            |(mut m, mut adam)| train_step(&mut m, &mut adam, &batch, &weights, &params, &train_cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, physics, model);
criterion_main!(benches);
