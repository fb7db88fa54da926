//! pavecrack-core: building blocks for binary crack detection on road
//! survey imagery.
//!
//! The crate covers the full experiment loop:
//!
//! - [`dataset`] — tiling survey frames into fixed-size patches and
//!   assembling balanced train/val/test manifests.
//! - [`augment`] — deterministic flip/rotation expansion of a manifest.
//! - [`model`] — registry of pretrained backbones, binary classifier
//!   heads, freeze/unfreeze control and preprocessing.
//! - [`trainer`] — the two-phase fine-tuning protocol with replicates.
//! - [`evaluation`] — confusion counts, derived metrics and
//!   cross-replicate aggregates.
//! - [`reporting`] — result tables and training-curve figures.
//! - [`inference`] — tiled full-frame classification with overlays.
//!
//! Heavy inner loops (patch extraction, augmentation, im2col, batch
//! preprocessing) run on rayon when the default `parallel` feature is
//! enabled and fall back to plain iterators without it. Numeric results
//! are identical either way: reductions happen in a fixed order.

pub mod augment;
pub mod dataset;
pub mod draw;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod par;
pub mod reporting;
pub mod synth;
pub mod trainer;

pub use dataset::{DatasetManifest, GridSpec, Label, PatchSample, Split};
pub use evaluation::{AggregateStats, ConfusionMatrix, MetricSet};
pub use model::{BackboneSpec, ClassifierModel};
pub use trainer::{EpochRecord, RunHistory, TrainConfig};
