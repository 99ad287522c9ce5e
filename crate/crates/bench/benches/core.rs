use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssft_core::analysis::{auc, Direction};
use ssft_core::datagen::{build_spec, feature_matrix, sample_splits};
use ssft_core::dynamics::compute_records;
use ssft_core::models::{step, OptimizerState};
use ssft_core::theory::{hard_margin_svm, projected_gradient_qp, random_separable_instance, BinaryData};
use ssft_core::{LinearModel, Phase, PredictionHistory, SpecConfig, TrainConfig};

fn training_epoch(c: &mut Criterion) {
    let spec = build_spec(&SpecConfig::ten_class_default()).unwrap();
    let (a, _) = sample_splits(&spec);
    let x = feature_matrix(&a);
    let labels: Vec<usize> = a.iter().map(|e| e.given_label).collect();
    let cfg = TrainConfig::multiclass_sgd(1e-2, 1);
    let mut model = LinearModel::random_init(10, spec.d, &cfg);
    let mut state = OptimizerState::new(&model);
    c.bench_function("full-batch step, n=100 d=500 10 classes", |b| {
        b.iter(|| step(&mut model, black_box(x.view()), &labels, &cfg, &mut state).unwrap())
    });
}

fn history(phase: Phase, rows: usize, epochs: usize, rng: &mut ChaCha8Rng) -> PredictionHistory {
    PredictionHistory {
        phase,
        epochs,
        example_ids: (0..rows as u64).collect(),
        correct: (0..rows).map(|_| (0..=epochs).map(|_| rng.random_bool(0.7)).collect()).collect(),
        confidence: (0..rows).map(|_| (0..=epochs).map(|_| rng.random()).collect()).collect(),
    }
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ha = history(Phase::A, 100, 300, &mut rng);
    let hb = history(Phase::B, 100, 500, &mut rng);
    c.bench_function("metric records, 100 examples x 300+500 epochs", |b| {
        b.iter(|| compute_records(black_box(&ha), black_box(&hb), |_| None).unwrap())
    });
}

fn auc_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..2000).map(|_| rng.random_range(0..50) as f64).collect();
    let positive: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.1)).collect();
    c.bench_function("AUC with ties, 2000 scores", |b| {
        b.iter(|| auc("x", black_box(&scores), &positive, Direction::HigherIsSuspicious).unwrap())
    });
}

fn svm(c: &mut Criterion) {
    let d = BinaryData::from_examples(&random_separable_instance(20, 50, 0));
    c.bench_function("hard-margin dual ascent, n=20 d=50", |b| b.iter(|| hard_margin_svm(black_box(&d)).unwrap()));
    c.bench_function("projected-gradient QP, n=20 d=50", |b| {
        b.iter(|| projected_gradient_qp(black_box(&d), 100_000).unwrap())
    });
}

criterion_group!(benches, training_epoch, metrics, auc_bench, svm);
criterion_main!(benches);
