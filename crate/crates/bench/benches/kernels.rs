use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use ocr_bench::{domain, filled};
use ocr_core::augment::{strong_augment, weak_augment};
use ocr_core::nets::sgd_step;
use ocr_core::ocr::{cross_entropy, ocr_loss, residual};
use ocr_core::{AugmentConfig, Model, OptimizerState, Tensor};

fn matmul(c: &mut Criterion) {
    let a = filled(&[64, 768], 1, true).unwrap();
    let b = filled(&[768, 128], 2, true).unwrap();
    c.bench_function("matmul 64x768x128 fwd+bwd", |bench| {
        bench.iter(|| {
            let y = a.matmul(&b).unwrap().sum();
            y.backward().unwrap();
            black_box(y.item())
        })
    });
}

fn augment(c: &mut Criterion) {
    let d = domain(7, 1, 16).unwrap();
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("weak augment 16px", |b| b.iter(|| black_box(weak_augment(&d.images[0], &cfg, &mut rng).unwrap())));
    c.bench_function("strong augment 16px", |b| b.iter(|| black_box(strong_augment(&d.images[0], &cfg, &mut rng).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let mut model = Model::init(&[768, 128, 64, 32], 7, 0).unwrap();
    let x_o = filled(&[64, 768], 3, false).unwrap();
    let x_a = filled(&[64, 768], 4, false).unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 7).collect();
    let opt = OptimizerState { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
    c.bench_function("ocr train step batch 64", |b| {
        b.iter(|| {
            let z_o = model.backbone.forward(&x_o).unwrap();
            let z_a = model.backbone.forward(&x_a).unwrap();
            let ce = cross_entropy(&model.head.forward(&z_o).unwrap(), &labels).unwrap();
            let reg: Tensor = ocr_loss(&model.head, &residual(&z_o, &z_a, 0.5).unwrap()).unwrap();
            let loss = ce.add(&reg).unwrap();
            model.zero_grad();
            loss.backward().unwrap();
            sgd_step(&opt, &mut model.params_mut()).unwrap();
            black_box(loss.item())
        })
    });
}

criterion_group!(benches, matmul, augment, train_step);
criterion_main!(benches);
