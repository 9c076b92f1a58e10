use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use quanta_core::infer::predict;
use quanta_core::nn::forward;
use quanta_core::stats::thin;
use quanta_core::train::masked_cross_entropy;
use quanta_core::{BitVolume, InferConfig, ModelConfig, ModelState, RandomSource, Shape3, Tensor5};

fn noise(s: Shape3, p: f64) -> BitVolume {
    let mut rng = RandomSource::new(1).rng();
    BitVolume::from_fn(s, |_, _, _| rng.gen::<f64>() < p)
}

fn bits(c: &mut Criterion) {
    let v = noise(Shape3::new(64, 128, 128).unwrap(), 0.06);
    c.bench_function("popcount 64x128x128", |b| b.iter(|| black_box(&v).popcount()));
    c.bench_function("thin 64x128x128", |b| {
        let mut rng = RandomSource::new(2).rng();
        b.iter(|| thin(black_box(&v), 0.5, &mut rng).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let m = ModelState::init(&ModelConfig::default(), &RandomSource::new(3)).unwrap();
    let s = Shape3::new(16, 32, 32).unwrap();
    let v = noise(s, 0.1);
    let x = Tensor5::from_bits(&[&v]).unwrap();
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.bench_function("forward 1x1x16x32x32", |b| b.iter(|| forward(&m, black_box(&x), false).unwrap()));
    g.bench_function("forward+loss 1x1x16x32x32", |b| {
        let mask = v.complement();
        b.iter(|| {
            let out = forward(&m, &x, true).unwrap();
            masked_cross_entropy(&out.logits, &[&v], &[&mask]).unwrap()
        })
    });
    let big = noise(Shape3::new(16, 64, 64).unwrap(), 0.06);
    g.bench_function("predict 16x64x64", |b| {
        b.iter(|| predict(&m, black_box(&big), &InferConfig::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bits, network);
criterion_main!(benches);
