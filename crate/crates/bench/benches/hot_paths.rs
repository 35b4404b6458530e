use std::hint::black_box;

use beamlab::channel::{generate_scene, synthesize_all};
use beamlab::dknn::lsh::CosineLsh;
use beamlab::mlp::train_arrays;
use beamlab::shap::{shapley_sampled, ModelOutput, ShapTarget};
use beamlab::{seed, ArrayConfig, MlpModel, SceneParams, TrainConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, s: u64) -> Array2<f64> {
    let mut rng = seed::rng(s);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn forward(c: &mut Criterion) {
    let model = MlpModel::beam_classifier(32, 128, 1).unwrap();
    let x = random_matrix(1, 32, 2);
    let row = x.row(0).to_vec();
    c.bench_function("forward_single_row", |b| b.iter(|| model.forward(black_box(&row)).unwrap()));
    let batch = random_matrix(256, 32, 3);
    c.bench_function("forward_batch_256", |b| b.iter(|| model.probs_batch(black_box(batch.view())).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let model = MlpModel::beam_classifier(32, 128, 1).unwrap();
    let x = random_matrix(256, 32, 4);
    let mut rng = seed::rng(5);
    let y: Vec<usize> = (0..256).map(|_| rng.random_range(0..128)).collect();
    // one epoch over one full batch is one Adam step
    let tc = TrainConfig { epochs: 1, batch_size: 256, ..TrainConfig::default() };
    c.bench_function("adam_step_batch_256", |b| {
        b.iter_batched(|| model.clone(), |m| train_arrays(&m, x.view(), &y, &tc).unwrap(), BatchSize::SmallInput)
    });
}

fn shap(c: &mut Criterion) {
    let model = MlpModel::beam_classifier(32, 128, 1).unwrap();
    let x = random_matrix(1, 32, 6).row(0).to_vec();
    let refs = random_matrix(16, 32, 7);
    let game = ModelOutput { model: &model, target: ShapTarget::Logits };
    c.bench_function("shap_32_perms_16_refs", |b| {
        b.iter(|| shapley_sampled(&game, black_box(&x), refs.view(), 32, true, 0).unwrap())
    });
}

fn lsh_query(c: &mut Criterion) {
    let points = random_matrix(5000, 64, 8).mapv(f64::abs);
    let idx = CosineLsh::build(points.view(), &Default::default(), 9).unwrap();
    let q = random_matrix(1, 64, 10).mapv(f64::abs);
    c.bench_function("lsh_query_k10_n5000", |b| b.iter(|| idx.query(black_box(q.row(0)), 10)));
    c.bench_function("exact_query_k10_n5000", |b| b.iter(|| idx.exact(black_box(q.row(0)), 10)));
}

fn channels(c: &mut Criterion) {
    let cfg = ArrayConfig::default();
    let scene = generate_scene(&SceneParams::default(), &cfg, 11).unwrap();
    c.bench_function("synthesize_622_channels", |b| b.iter(|| synthesize_all(black_box(&scene), &cfg).unwrap()));
}

criterion_group!(benches, forward, train_step, shap, lsh_query, channels);
criterion_main!(benches);
