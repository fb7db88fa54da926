//! Compares the rayon-backed and sequential paths of the data-parallel
//! inner loops: frame tiling, batch preprocessing and one training
//! step. Build with the default features; the sequential figures come
//! from the `_seq` twins compiled alongside.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pavecrack_core::dataset::{extract_patches, GridSpec};
use pavecrack_core::model::{preprocess, preprocess_batch, write_tiny_backbone, ClassifierModel, WeightsCache};
use pavecrack_core::par;
use pavecrack_core::synth;
use pavecrack_core::trainer::{train_phase, Phase, PhaseOptions, TrainData};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_tiling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frame = synth::textured_frame(&mut rng, 2440, 1080);
    let grid = GridSpec::default_survey();
    let mut group = c.benchmark_group("extract_patches");
    group.bench_function("parallel", |b| {
        b.iter(|| extract_patches(black_box(&frame), &grid, "f").unwrap())
    });
    group.bench_function("sequential", |b| {
        // Same copy loop, driven through the sequential helper.
        b.iter(|| {
            par::map_indexed_seq(grid.patch_count(), |i| {
                let row = i as u32 / grid.cols;
                let col = i as u32 % grid.cols;
                let (x0, y0) = grid.patch_origin(row, col);
                let mut out = image::RgbImage::new(grid.patch_size, grid.patch_size);
                for y in 0..grid.patch_size {
                    for x in 0..grid.patch_size {
                        out.put_pixel(x, y, *frame.get_pixel(x0 + x, y0 + y));
                    }
                }
                black_box(out)
            })
        })
    });
    group.finish();
}

fn bench_preprocess(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (pos, _) = synth::patch_set(&mut rng, 32, 200);
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_backbone(&dir.path().join("tiny.pvck"), 3).unwrap();
    let refs: Vec<&image::RgbImage> = pos.iter().collect();
    let mut group = c.benchmark_group("preprocess_batch_32");
    group.bench_function("parallel", |b| {
        b.iter(|| preprocess_batch(black_box(&refs), &spec))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let tensors: Vec<_> =
                par::map_indexed_seq(refs.len(), |i| preprocess(refs[i], &spec));
            black_box(tensors)
        })
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    let spec = write_tiny_backbone(&dir.path().join("tiny.pvck"), 4).unwrap();
    let cache = WeightsCache::new(dir.path());
    let (pos, neg) = synth::patch_set(&mut rng, 16, 200);
    let mut inputs = pos;
    let mut targets = vec![1.0f32; 16];
    inputs.extend(neg);
    targets.extend(vec![0.0f32; 16]);
    let data = TrainData::new(inputs, targets);
    let opts = PhaseOptions {
        epochs: 1,
        learning_rate: 1e-3,
        start_epoch: 0,
        phase: Phase::FineTune,
        batch_size: 32,
        shuffle_seed: 0,
    };
    c.bench_function("finetune_epoch_32_samples", |b| {
        b.iter(|| {
            let mut model = ClassifierModel::instantiate(&spec, &cache, 0).unwrap();
            model.unfreeze_top(1.0).unwrap();
            let mut adam = pavecrack_core::model::nn::Adam::default();
            train_phase(&mut model, &mut adam, &data, &data, &opts).unwrap()
        })
    });
}

criterion_group!(benches, bench_tiling, bench_preprocess, bench_train_step);
criterion_main!(benches);
