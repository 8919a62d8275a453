use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use palgan_core::colorspace::rgb_to_lab;
use palgan_core::data::{synth::synth_image, Batch};
use palgan_core::model::Model;
use palgan_core::palette::{soft_histogram, PaletteGrid};
use palgan_core::training::{TrainConfig, Trainer};
use palgan_core::{ChromaMap, Graph, ModelConfig, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_3x3");
    for ch in [16, 64] {
        let x = Tensor::randn(&[4, ch, 32, 32], 1.0, &mut rng);
        let w = Tensor::randn(&[ch, ch, 3, 3], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.constant(x.clone()), g.leaf(w.clone()));
                let y = g.conv2d(xv, wv, None, 1, 1);
                let l = g.sum(y);
                g.backward(l)
            })
        });
    }
    group.finish();
}

fn histogram(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, chroma): (_, ChromaMap) = rgb_to_lab(&synth_image(64, &mut rng)).unwrap();
    let mut group = c.benchmark_group("soft_histogram_64px");
    for bins in [16, 256, 1024] {
        let n = (bins as f64).sqrt() as usize;
        let grid = PaletteGrid::new(n, n, 0.1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(bins), &grid, |b, grid| {
            b.iter(|| soft_histogram(&chroma, grid).unwrap())
        });
    }
    group.finish();
}

fn colorize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::new(ModelConfig::toy()).unwrap();
    let params = model.init(&mut rng);
    let (gray, _) = rgb_to_lab(&synth_image(64, &mut rng)).unwrap();
    let z = model.latent(&mut rng);
    c.bench_function("toy_colorize_64px", |b| b.iter(|| model.colorize(&gray, None, &z, &params).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = TrainConfig {
        preset: "toy".into(),
        crop_size: 32,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, 1_000_000).unwrap();
    let (gray, chroma) = (0..4).map(|_| rgb_to_lab(&synth_image(32, &mut rng)).unwrap()).unzip();
    let batch = Batch { gray, chroma };
    let mut group = c.benchmark_group("toy_train_step_32px");
    group.sample_size(10);
    group.bench_function("batch4", |b| b.iter(|| trainer.train_step(&batch).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, histogram, colorize, train_step);
criterion_main!(benches);
