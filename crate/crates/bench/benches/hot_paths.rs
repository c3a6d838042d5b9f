use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scriptgen_bench::class_fixture;
use scriptgen_core::assess::{assess_script, TargetDistribution};
use scriptgen_core::gan::{top_n, train_examgan, GanConfig};
use scriptgen_core::neural::LstmCell;
use scriptgen_core::seeding::{sample_script_rsf, training_data_from_masteries, SeedingConfig};

fn metrics(c: &mut Criterion) {
    let cohort = class_fixture(1);
    let masteries: Vec<Vec<f64>> = cohort.latent.values().cloned().collect();
    let script = sample_script_rsf(&cohort.course, 40, 3).unwrap();
    let target = TargetDistribution::default();
    c.bench_function("assess_script 50 students x 40 questions", |b| {
        b.iter(|| assess_script(black_box(&masteries), &script, &cohort.course, &target).unwrap())
    });
}

fn lstm_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cell = LstmCell::new(60, 64, &mut rng);
    let x: Vec<f64> = (0..60).map(|_| rng.random()).collect();
    let h = vec![0.1; 64];
    let s = vec![0.0; 64];
    c.bench_function("lstm step 60 -> 64", |b| {
        b.iter(|| cell.step(black_box(&x), &h, &s).unwrap())
    });
}

fn selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    c.bench_function("top_n 40 of 500", |b| b.iter(|| top_n(black_box(&scores), 40).unwrap()));
}

fn gan_epoch(c: &mut Criterion) {
    let cohort = class_fixture(4);
    let masteries: Vec<Vec<f64>> = cohort.latent.values().cloned().collect();
    let target = TargetDistribution::default();
    let (data, _) =
        training_data_from_masteries(&masteries, &cohort.course, &SeedingConfig::default(), &target, 5).unwrap();
    let cfg = GanConfig {
        epochs: 1,
        ..GanConfig::default()
    };
    let bank = cohort.course.questions().len();
    let mut group = c.benchmark_group("gan");
    group.sample_size(10);
    group.bench_function("examgan epoch over 10 instances", |b| {
        b.iter(|| train_examgan(black_box(&data), bank, &cfg, 6).unwrap())
    });
    group.finish();
}

criterion_group!(benches, metrics, lstm_step, selection, gan_epoch);
criterion_main!(benches);
