//! Deterministic geometric dataset expansion: flips and right-angle
//! rotations, label-preserving, materialized to disk.

use std::path::Path;

use image::{imageops, RgbImage};
use thiserror::Error;

use crate::dataset::{
    DatasetError, DatasetManifest, ManifestEntry, PatchSample, Split, IDENTITY_TAG,
};
use crate::par;

/// One exact geometric transform. Quarter rotations preserve the raster
/// dimensions only for square inputs; none of the variants resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::HFlip,
        Transform::VFlip,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Transform::Identity => IDENTITY_TAG,
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
        }
    }

    pub fn parse(s: &str) -> Option<Transform> {
        Transform::ALL.iter().copied().find(|t| t.tag() == s)
    }

    /// True for the rotations that swap raster axes.
    pub fn is_quarter_rotation(&self) -> bool {
        matches!(self, Transform::Rot90 | Transform::Rot270)
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        match self {
            Transform::Identity => img.clone(),
            Transform::HFlip => imageops::flip_horizontal(img),
            Transform::VFlip => imageops::flip_vertical(img),
            Transform::Rot90 => imageops::rotate90(img),
            Transform::Rot180 => imageops::rotate180(img),
            Transform::Rot270 => imageops::rotate270(img),
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Ordered, duplicate-free set of transforms. Identity is always a
/// member so the originals survive expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformSet {
    transforms: Vec<Transform>,
}

impl TransformSet {
    /// Build a set, prepending identity when absent.
    pub fn new(transforms: Vec<Transform>) -> Result<Self, AugmentError> {
        let mut seen = std::collections::HashSet::new();
        for t in &transforms {
            if !seen.insert(*t) {
                return Err(AugmentError::DuplicateTransform(t.tag().to_string()));
            }
        }
        let mut transforms = transforms;
        if !transforms.contains(&Transform::Identity) {
            transforms.insert(0, Transform::Identity);
        }
        Ok(TransformSet { transforms })
    }

    /// All six exact transforms of the square.
    pub fn dihedral() -> Self {
        TransformSet {
            transforms: Transform::ALL.to_vec(),
        }
    }

    pub fn identity_only() -> Self {
        TransformSet {
            transforms: vec![Transform::Identity],
        }
    }

    /// Parse a comma-separated tag list, e.g. `hflip,vflip,rot90`.
    /// Identity need not be listed; it is always included.
    pub fn parse_list(list: &str) -> Result<Self, AugmentError> {
        let mut transforms = Vec::new();
        for tag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let t = Transform::parse(tag)
                .ok_or_else(|| AugmentError::UnknownTransform(tag.to_string()))?;
            transforms.push(t);
        }
        TransformSet::new(transforms)
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    fn has_quarter_rotation(&self) -> bool {
        self.transforms.iter().any(Transform::is_quarter_rotation)
    }
}

impl Default for TransformSet {
    fn default() -> Self {
        TransformSet::dihedral()
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("duplicate transform '{0}' in set")]
    DuplicateTransform(String),
    #[error("unknown transform '{0}'")]
    UnknownTransform(String),
    #[error("quarter rotations require square patches, got {width}x{height}")]
    NonSquare { width: u32, height: u32 },
    #[error("cannot expand empty split {0}")]
    EmptySplit(Split),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Compose an existing transform tag with a newly applied one.
fn compose_tag(existing: &str, applied: Transform) -> String {
    if applied == Transform::Identity {
        existing.to_string()
    } else if existing == IDENTITY_TAG {
        applied.tag().to_string()
    } else {
        format!("{existing}+{}", applied.tag())
    }
}

/// Apply every transform of `set` to one sample.
///
/// Each output keeps the input's label and source identity; only the
/// pixels and the transform tag change. The identity output is
/// bit-identical to the input.
pub fn augment_sample(
    sample: &PatchSample,
    set: &TransformSet,
) -> Result<Vec<PatchSample>, AugmentError> {
    let (w, h) = sample.pixels.dimensions();
    if w != h && set.has_quarter_rotation() {
        return Err(AugmentError::NonSquare {
            width: w,
            height: h,
        });
    }
    Ok(set
        .transforms()
        .iter()
        .map(|t| PatchSample {
            pixels: t.apply(&sample.pixels),
            label: sample.label,
            source_frame_id: sample.source_frame_id.clone(),
            grid_row: sample.grid_row,
            grid_col: sample.grid_col,
            transform_tag: compose_tag(&sample.transform_tag, *t),
        })
        .collect())
}

/// Derived file path for a transformed patch: `a/b.png` -> `a/b__rot90.png`.
fn transformed_path(path: &str, transform: Transform) -> String {
    let p = Path::new(path);
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or(path);
    let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("png");
    let name = format!("{stem}__{}.{ext}", transform.tag());
    match p.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => {
            parent.join(name).to_string_lossy().into_owned()
        }
        _ => name,
    }
}

/// Expand the chosen splits of a manifest by `set`, writing the new
/// patch files next to the originals under `base_dir`.
///
/// Expanded splits grow by exactly `set.len()`; other splits are copied
/// untouched. Class balance is preserved because every sample of either
/// class produces the same number of outputs.
pub fn expand_dataset(
    manifest: &DatasetManifest,
    set: &TransformSet,
    splits_to_expand: &[Split],
    base_dir: &Path,
) -> Result<DatasetManifest, AugmentError> {
    for &split in splits_to_expand {
        if manifest.split_entries(split).next().is_none() {
            return Err(AugmentError::EmptySplit(split));
        }
    }

    let expanded: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| splits_to_expand.contains(&e.split))
        .collect();

    // Transform and write patch files; one job per (entry, transform).
    let jobs: Vec<(usize, Transform)> = expanded
        .iter()
        .enumerate()
        .flat_map(|(i, _)| set.transforms().iter().map(move |t| (i, *t)))
        .filter(|(_, t)| *t != Transform::Identity)
        .collect();
    let results: Vec<Result<(), AugmentError>> = par::map_indexed(jobs.len(), |j| {
        let (i, t) = jobs[j];
        let entry = expanded[i];
        let src = base_dir.join(&entry.path);
        let img = image::open(&src)
            .map_err(|e| {
                AugmentError::Dataset(DatasetError::Image {
                    path: src.clone(),
                    source: e,
                })
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w != h && t.is_quarter_rotation() {
            return Err(AugmentError::NonSquare {
                width: w,
                height: h,
            });
        }
        let out = base_dir.join(transformed_path(&entry.path, t));
        t.apply(&img)
            .save(&out)
            .map_err(|e| {
                AugmentError::Dataset(DatasetError::Image {
                    path: out.clone(),
                    source: e,
                })
            })
    });
    for r in results {
        r?;
    }

    let mut entries = Vec::with_capacity(manifest.entries.len() * set.len());
    for e in &manifest.entries {
        if !splits_to_expand.contains(&e.split) {
            entries.push(e.clone());
            continue;
        }
        for t in set.transforms() {
            if *t == Transform::Identity {
                entries.push(e.clone());
            } else {
                entries.push(ManifestEntry {
                    path: transformed_path(&e.path, *t),
                    label: e.label,
                    split: e.split,
                    source_frame_id: e.source_frame_id.clone(),
                    grid_row: e.grid_row,
                    grid_col: e.grid_col,
                    transform_tag: compose_tag(&e.transform_tag, *t),
                });
            }
        }
    }

    Ok(DatasetManifest {
        entries,
        seed: manifest.seed,
    })
}
