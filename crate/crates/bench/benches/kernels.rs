use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ddam_core::denoiser::{loss_and_grad_on, parameter_count, Example};
use ddam_core::duality::gdt_transform;
use ddam_core::pseudo_am::{pl_gradient, CouplingMatrix, PatternSet};
use ddam_core::seed;
use ddam_core::uddm::reverse_sample;
use ddam_core::{CoupledLogitsDenoiser, DiffusionSchedule, SampleMode, TokenSequence};
use rand::Rng;

fn random_model(l: usize, k: usize, rng: &mut impl Rng) -> CoupledLogitsDenoiser {
    let params = (0..parameter_count(l, k).unwrap()).map(|_| rng.random::<f64>() - 0.5).collect();
    CoupledLogitsDenoiser::from_params(l, k, params).unwrap()
}

fn bench_pl_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("pl_gradient");
    for len in [16usize, 64] {
        let mut rng = seed::stream(1, "bench", len as u64);
        let patterns = PatternSet::random(6, len, &mut rng).unwrap();
        let couplings = CouplingMatrix::zeros(len, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| pl_gradient(black_box(&couplings), black_box(&patterns)).unwrap())
        });
    }
    group.finish();
}

fn bench_gdt(c: &mut Criterion) {
    let mut group = c.benchmark_group("gdt_transform");
    for k in [2usize, 16, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| gdt_transform(black_box(0.6), k, 64).unwrap())
        });
    }
    group.finish();
}

fn bench_denoiser_loss(c: &mut Criterion) {
    let s = DiffusionSchedule::default();
    let mut rng = seed::stream(2, "bench", 0);
    let (l, k) = (16, 16);
    let model = random_model(l, k, &mut rng);
    let batch: Vec<Example> = (0..32)
        .map(|_| Example {
            clean: TokenSequence::uniform_random(l, k, &mut rng).unwrap(),
            noisy: TokenSequence::uniform_random(l, k, &mut rng).unwrap(),
            t: rng.random_range(0.05..0.95),
        })
        .collect();
    c.bench_function("denoiser_loss_and_grad_L16_K16_batch32", |b| {
        b.iter(|| loss_and_grad_on(black_box(&model), black_box(&batch), &s).unwrap())
    });
}

fn bench_reverse_sample(c: &mut Criterion) {
    let s = DiffusionSchedule::default();
    let mut rng = seed::stream(3, "bench", 0);
    let model = random_model(16, 16, &mut rng);
    let start = TokenSequence::uniform_random(16, 16, &mut rng).unwrap();
    c.bench_function("reverse_sample_L16_K16_100_steps", |b| {
        b.iter(|| reverse_sample(&model, black_box(&start), 1.0, 100, &s, SampleMode::Stochastic, &mut rng).unwrap())
    });
}

criterion_group!(benches, bench_pl_gradient, bench_gdt, bench_denoiser_loss, bench_reverse_sample);
criterion_main!(benches);
