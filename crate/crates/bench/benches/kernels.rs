use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use l2tkt::cka::cka_similarity;
use l2tkt::data::{synth_generate, SynthConfig};
use l2tkt::diffcore::{im2col, ConvGeom, Tensor};
use l2tkt::models::{init_student, init_teacher_from_baseline, EncoderConfig, StudentModel};
use l2tkt::trainer::{AuxBatch, LabeledBatch, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    // First-layer convolution of a 32-image batch at 32×32.
    let a = random(&[32 * 16 * 16, 27], 1);
    let b = random(&[27, 8], 2);
    c.bench_function("matmul_8192x27x8", |bench| {
        bench.iter(|| black_box(a.matmul(&b)))
    });
    let a = random(&[256, 256], 3);
    let b = random(&[256, 256], 4);
    c.bench_function("matmul_256", |bench| bench.iter(|| black_box(a.matmul(&b))));
}

fn conv_unfold(c: &mut Criterion) {
    let geom = ConvGeom {
        n: 32,
        h: 32,
        w: 32,
        c: 3,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let x = random(&geom.in_shape(), 5);
    c.bench_function("im2col_32x32x3", |bench| {
        bench.iter(|| black_box(im2col(&x, &geom)))
    });
}

fn cka(c: &mut Criterion) {
    let t = random(&[16, 32], 6);
    let s = random(&[16, 32], 7);
    c.bench_function("cka_16x32", |bench| {
        bench.iter(|| black_box(cka_similarity(&t, &s, true).unwrap()))
    });
}

fn meta_step(c: &mut Criterion) {
    let data = synth_generate(&SynthConfig {
        n: 200,
        n_aux: 32,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let arch = EncoderConfig::default();
    let baseline: StudentModel = init_student(&arch, 1).unwrap();
    let teacher = init_teacher_from_baseline(&baseline, 2).unwrap();
    let cfg = TrainConfig {
        lambda_s: 0.01,
        lambda_t: 0.01,
        ..TrainConfig::default()
    };
    let state = TrainState::new(
        &cfg,
        init_student(&arch, 2).unwrap(),
        teacher,
        &data.labeled,
    )
    .unwrap();
    let aux: Vec<_> = data.masked.iter().take(cfg.batch_size_aux).collect();
    let aux = AuxBatch::from_samples(&aux).unwrap();
    let quiz: Vec<_> = data
        .labeled
        .iter()
        .filter(|s| state.pool.contains(s.id))
        .take(cfg.batch_size_qp)
        .collect();
    let quiz = LabeledBatch::from_samples(&quiz).unwrap();
    let mut group = c.benchmark_group("teacher_meta_step");
    group.sample_size(20);
    for (name, second_order) in [("second_order", true), ("finite_difference", false)] {
        let cfg = TrainConfig {
            second_order,
            ..cfg.clone()
        };
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut s = state.clone();
                black_box(s.teacher_meta_step(&cfg, &aux, &quiz).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv_unfold, cka, meta_step);
criterion_main!(benches);
