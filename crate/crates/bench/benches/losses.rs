use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use crl_core::distillation::{fkd_old_loss, lwf_old_loss};
use crl_core::eval::{retrieval_metrics, SampleMeta};
use crl_core::numerics::{backward, forward};
use crl_core::{Architecture, DenseTensor, DistillConfig, Method, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseTensor {
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn model_passes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arch = Architecture::default();
    let model = ModelState::init(&arch, 180, &mut rng).unwrap();
    let x = matrix(&mut rng, 64, arch.input_dim);
    c.bench_function("forward 64x32 -> 64 -> 32 -> 180", |b| {
        b.iter(|| forward(black_box(&model), black_box(&x)).unwrap().activations)
    });
    let out = forward(&model, &x).unwrap();
    let ga = matrix(&mut rng, 64, 180);
    let ge = DenseTensor::zeros(out.embeddings.shape());
    c.bench_function("backward 64 samples", |b| {
        b.iter(|| backward(black_box(&out.cache), black_box(&ga), black_box(&ge)).unwrap())
    });
}

fn old_losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("old-model loss, 64 x 1000 old classes");
    let old = matrix(&mut rng, 64, 1000);
    let new = matrix(&mut rng, 64, 1000);
    group.bench_function("lwf", |b| b.iter(|| lwf_old_loss(black_box(&old), black_box(&new), 2.0).unwrap()));
    for k in [20, 200, 0] {
        let mut cfg = DistillConfig::new(Method::FkdNsCr);
        cfg.neighborhood_size = k;
        let name = if k == 0 { "all".to_string() } else { k.to_string() };
        group.bench_with_input(BenchmarkId::new("fkd ns+cr, K", name), &cfg, |b, cfg| {
            b.iter(|| fkd_old_loss(black_box(&old), black_box(&new), cfg).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (nq, ng, d) = (160, 480, 32);
    let q = matrix(&mut rng, nq, d);
    let g = matrix(&mut rng, ng, d);
    let meta = |n: usize, rng: &mut ChaCha8Rng| -> Vec<SampleMeta> {
        (0..n)
            .map(|_| SampleMeta {
                identity: rng.gen_range(0..80),
                camera: rng.gen_range(0..4),
            })
            .collect()
    };
    let qm = meta(nq, &mut rng);
    let gm = meta(ng, &mut rng);
    c.bench_function("retrieval 160 queries x 480 gallery", |b| {
        b.iter(|| retrieval_metrics(black_box(&q), &qm, black_box(&g), &gm).unwrap())
    });
}

criterion_group!(benches, model_passes, old_losses, retrieval);
criterion_main!(benches);
