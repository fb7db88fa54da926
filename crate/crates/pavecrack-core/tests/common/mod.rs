//! Shared fixtures for the integration suites.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pavecrack_core::dataset::{build_manifest, BuildOptions, DatasetManifest, SampleRef};
use pavecrack_core::model::{write_tiny_backbone, BackboneSpec, WeightsCache};
use pavecrack_core::synth;

/// Write a seeded tiny backbone archive and return its spec + cache.
pub fn tiny_backbone(dir: &Path, seed: u64) -> (BackboneSpec, WeightsCache) {
    let spec = write_tiny_backbone(&dir.join("tinycnn.pvck"), seed).unwrap();
    (spec, WeightsCache::new(dir))
}

/// Materialize a labeled synthetic patch dataset on disk: PNG files
/// plus a balanced manifest with the given split fractions.
pub fn materialize_dataset(
    dir: &Path,
    n_per_class: usize,
    side: u32,
    fractions: (f64, f64, f64),
    seed: u64,
) -> (DatasetManifest, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, neg) = synth::patch_set(&mut rng, n_per_class, side);
    let patches_dir = dir.join("patches");
    std::fs::create_dir_all(&patches_dir).unwrap();
    let write_class = |class: &str, imgs: &[image::RgbImage]| -> Vec<SampleRef> {
        imgs.iter()
            .enumerate()
            .map(|(i, img)| {
                let rel = format!("patches/{class}_{i:05}.png");
                img.save(dir.join(&rel)).unwrap();
                SampleRef::from_path(rel)
            })
            .collect()
    };
    let positives = write_class("pos", &pos);
    let negatives = write_class("neg", &neg);
    let manifest =
        build_manifest(&positives, &negatives, fractions, seed, &BuildOptions::default())
            .unwrap();
    let manifest_path = dir.join("manifest.tsv");
    manifest.write(&manifest_path).unwrap();
    (manifest, dir.to_path_buf())
}
