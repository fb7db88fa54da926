//! Backbone registry, preprocessing and the binary classifier model.
//!
//! Backbones are consumed as pretrained parameter archives through a
//! provider interface (see [`archive`]); this module never rebuilds the
//! published architectures itself. A classifier is a frozen feature
//! extractor plus a freshly initialized one-unit logistic head; units
//! of the extractor can be unfrozen top-down for fine-tuning.

pub mod archive;
pub mod nn;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use archive::{ArchiveHeader, ArchiveKind, ParsedArchive};
use nn::{global_avg_pool, global_avg_pool_backward, Adam, Dense, LayerGrad, Network};

pub use archive::{file_digest, LockEntry, WeightsCache};

/// Default share of top backbone units unfrozen for fine-tuning.
pub const DEFAULT_UNFREEZE_FRACTION: f64 = 0.25;

/// Inference batch size used when classifying long patch lists.
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("pretrained archive for '{name}' unavailable at {path}: {reason}")]
    Provenance {
        name: String,
        path: PathBuf,
        reason: String,
    },
    #[error("archive digest mismatch for '{name}': lock records {expected}, file has {actual}")]
    Integrity {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("unfreeze fraction {0} outside [0, 1]")]
    FractionRange(f64),
    #[error("unknown backbone '{0}'")]
    UnknownBackbone(String),
    #[error("archive {path}: {msg}")]
    Archive { path: PathBuf, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-channel input normalization applied after the resize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Normalization {
    /// `x/255` then `(x - mean) / std`, channel-wise on RGB.
    MeanStd { mean: [f32; 3], std: [f32; 3] },
    /// `x/127.5 - 1`.
    ScaleSymmetric,
    /// RGB -> BGR swap, then subtract `mean` (BGR order, 0..255 scale).
    CaffeBgr { mean: [f32; 3] },
}

impl Normalization {
    pub fn imagenet_mean_std() -> Self {
        Normalization::MeanStd {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn scale_symmetric() -> Self {
        Normalization::ScaleSymmetric
    }

    pub fn caffe_bgr() -> Self {
        Normalization::CaffeBgr {
            mean: [103.939, 116.779, 123.68],
        }
    }
}

/// Descriptor of one pretrained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// Input side length the pretrained weights expect.
    pub native_input_side: u32,
    /// Freezable weight-bearing units in the canonical architecture.
    pub layer_count: usize,
    pub unfreeze_fraction: f64,
    /// Archive file, resolved against the weights cache when relative.
    pub pretrained_source: String,
    pub preprocessing: Normalization,
}

/// The six registered backbones, in stable registry order.
pub fn list_backbones() -> Vec<BackboneSpec> {
    let spec = |name: &str,
                side: u32,
                layer_count: usize,
                preprocessing: Normalization| BackboneSpec {
        name: name.to_string(),
        native_input_side: side,
        layer_count,
        unfreeze_fraction: DEFAULT_UNFREEZE_FRACTION,
        pretrained_source: format!("{}.pvck", name.to_lowercase()),
        preprocessing,
    };
    vec![
        spec("EfficientNetB7", 600, 163, Normalization::imagenet_mean_std()),
        spec("InceptionV3", 299, 94, Normalization::scale_symmetric()),
        spec("Xception", 299, 40, Normalization::scale_symmetric()),
        spec("MobileNetV2", 224, 52, Normalization::scale_symmetric()),
        spec("ResNet50", 224, 53, Normalization::caffe_bgr()),
        spec("VGG16", 224, 13, Normalization::caffe_bgr()),
    ]
}

/// Case-insensitive registry lookup; accepts the bare `ResNet` alias.
pub fn lookup_backbone(name: &str) -> Result<BackboneSpec, ModelError> {
    let needle = name.to_lowercase();
    list_backbones()
        .into_iter()
        .find(|s| {
            let canon = s.name.to_lowercase();
            canon == needle || (canon == "resnet50" && needle == "resnet")
        })
        .ok_or_else(|| ModelError::UnknownBackbone(name.to_string()))
}

/// Bilinear resize with half-pixel centers on f32 channels.
///
/// Interpolation uses the `a + f * (b - a)` form, so a constant input
/// stays bit-exactly constant.
fn resize_bilinear(src: &Array3<f32>, dst_side: usize) -> Array3<f32> {
    let (sh, sw, c) = src.dim();
    if sh == dst_side && sw == dst_side {
        return src.clone();
    }
    let scale_y = sh as f32 / dst_side as f32;
    let scale_x = sw as f32 / dst_side as f32;
    let mut out = Array3::<f32>::zeros((dst_side, dst_side, c));
    for dy in 0..dst_side {
        let fy = ((dy as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for dx in 0..dst_side {
            let fx = ((dx as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let a = src[(y0, x0, ch)];
                let b = src[(y0, x1, ch)];
                let d = src[(y1, x0, ch)];
                let e = src[(y1, x1, ch)];
                let top = a + tx * (b - a);
                let bottom = d + tx * (e - d);
                out[(dy, dx, ch)] = top + ty * (bottom - top);
            }
        }
    }
    out
}

fn normalize_in_place(x: &mut Array3<f32>, normalization: &Normalization) {
    match normalization {
        Normalization::MeanStd { mean, std } => {
            for lane in x.as_slice_mut().unwrap().chunks_exact_mut(3) {
                for ch in 0..3 {
                    lane[ch] = (lane[ch] / 255.0 - mean[ch]) / std[ch];
                }
            }
        }
        Normalization::ScaleSymmetric => {
            for v in x.iter_mut() {
                *v = *v / 127.5 - 1.0;
            }
        }
        Normalization::CaffeBgr { mean } => {
            for lane in x.as_slice_mut().unwrap().chunks_exact_mut(3) {
                lane.swap(0, 2);
                for ch in 0..3 {
                    lane[ch] -= mean[ch];
                }
            }
        }
    }
}

/// Resize a patch to the backbone's native input side and normalize it.
/// Output is HWC f32, deterministic for identical inputs.
pub fn preprocess(patch: &RgbImage, spec: &BackboneSpec) -> Array3<f32> {
    let (w, h) = patch.dimensions();
    let raw: Vec<f32> = patch.as_raw().iter().map(|&v| v as f32).collect();
    let src = Array3::from_shape_vec((h as usize, w as usize, 3), raw).unwrap();
    let mut resized = resize_bilinear(&src, spec.native_input_side as usize);
    normalize_in_place(&mut resized, &spec.preprocessing);
    resized
}

/// Preprocess a batch of patches into one NHWC tensor, in order.
pub fn preprocess_batch(patches: &[&RgbImage], spec: &BackboneSpec) -> Array4<f32> {
    let side = spec.native_input_side as usize;
    let plane = side * side * 3;
    let mut data = vec![0f32; patches.len() * plane];
    // Disjoint per-sample chunks; safe to fill in parallel.
    let processed: Vec<Array3<f32>> =
        par::map_indexed(patches.len(), |i| preprocess(patches[i], spec));
    for (chunk, tensor) in data.chunks_exact_mut(plane).zip(&processed) {
        chunk.copy_from_slice(tensor.as_slice().unwrap());
    }
    Array4::from_shape_vec((patches.len(), side, side, 3), data).unwrap()
}

/// A pretrained feature extractor with a binary logistic head.
///
/// Mutable only while training on one executor; shared read-only use
/// for inference is safe.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    spec: BackboneSpec,
    backbone: Network,
    head: Dense,
    trainable_units: Vec<bool>,
}

impl ClassifierModel {
    /// Load the backbone archive for `spec` from the cache and attach a
    /// freshly initialized head seeded by `head_seed`. The model starts
    /// fully frozen except the head.
    pub fn instantiate(
        spec: &BackboneSpec,
        cache: &WeightsCache,
        head_seed: u64,
    ) -> Result<Self, ModelError> {
        let path = cache.resolve(spec);
        if !path.is_file() {
            return Err(ModelError::Provenance {
                name: spec.name.clone(),
                path,
                reason: "archive not found".into(),
            });
        }
        cache.verify(spec)?;
        let parsed = archive::read_archive(&path).map_err(|e| match e {
            ModelError::Archive { path, msg } => ModelError::Provenance {
                name: spec.name.clone(),
                path,
                reason: format!("corrupt archive: {msg}"),
            },
            other => other,
        })?;
        if parsed.header.kind != ArchiveKind::Backbone {
            return Err(ModelError::Provenance {
                name: spec.name.clone(),
                path,
                reason: "expected a backbone archive, found a checkpoint".into(),
            });
        }
        let channels = parsed.network.output_channels(3);
        if channels != parsed.header.feature_channels {
            return Err(ModelError::Provenance {
                name: spec.name.clone(),
                path,
                reason: format!(
                    "header declares {} feature channels, layers produce {channels}",
                    parsed.header.feature_channels
                ),
            });
        }
        if parsed.network.unit_count() != spec.layer_count {
            log::debug!(
                "backbone '{}': archive has {} units, registry lists {}",
                spec.name,
                parsed.network.unit_count(),
                spec.layer_count
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let head = Dense::glorot(channels, 1, &mut rng);
        let unit_count = parsed.network.unit_count();
        Ok(ClassifierModel {
            spec: spec.clone(),
            backbone: parsed.network,
            head,
            trainable_units: vec![false; unit_count],
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Freezable units actually present in the loaded extractor.
    pub fn unit_count(&self) -> usize {
        self.backbone.unit_count()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.output_channels(3)
    }

    /// Freeze the whole extractor; only the head stays trainable.
    pub fn freeze_backbone(&mut self) {
        self.trainable_units.iter_mut().for_each(|u| *u = false);
    }

    /// Make exactly the topmost `ceil(fraction * unit_count)` units
    /// trainable (plus the always-trainable head).
    pub fn unfreeze_top(&mut self, fraction: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
            return Err(ModelError::FractionRange(fraction));
        }
        let n = self.unit_count();
        let unfrozen = ((fraction * n as f64).ceil() as usize).min(n);
        for (i, flag) in self.trainable_units.iter_mut().enumerate() {
            *flag = i >= n - unfrozen;
        }
        Ok(())
    }

    pub fn trainable_unit_flags(&self) -> &[bool] {
        &self.trainable_units
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head.parameter_count()
    }

    /// Parameters that would receive gradients right now.
    pub fn trainable_parameter_count(&self) -> usize {
        let mut count = self.head.parameter_count();
        for (unit, &trainable) in self.trainable_units.iter().enumerate() {
            if trainable {
                for layer_idx in self.backbone.unit_layers(unit) {
                    count += self.backbone.layers[layer_idx].parameter_count();
                }
            }
        }
        count
    }

    /// Total parameter count of extractor plus head.
    pub fn total_parameter_count(&self) -> usize {
        self.head.parameter_count()
            + self
                .backbone
                .layers
                .iter()
                .map(|l| l.parameter_count())
                .sum::<usize>()
    }

    /// Per-layer trainability flags for the extractor.
    pub(crate) fn layer_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.backbone.layers.len()];
        for (unit, &trainable) in self.trainable_units.iter().enumerate() {
            if trainable {
                for layer_idx in self.backbone.unit_layers(unit) {
                    flags[layer_idx] = true;
                }
            }
        }
        flags
    }

    pub fn backbone(&self) -> &Network {
        &self.backbone
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// Logits for a preprocessed NHWC batch.
    pub fn forward_logits(&self, batch: &Array4<f32>) -> Vec<f32> {
        let features = self.backbone.forward(batch);
        let pooled = global_avg_pool(&features);
        let logits = self.head.forward(&pooled);
        logits.column(0).to_vec()
    }

    /// Crack probabilities in [0, 1] for a preprocessed batch.
    pub fn predict_proba(&self, batch: &Array4<f32>) -> Vec<f32> {
        self.forward_logits(batch)
            .into_iter()
            .map(nn::sigmoid)
            .collect()
    }

    /// Preprocess raw patches and return crack probabilities, in order.
    pub fn predict_patches(&self, patches: &[&RgbImage]) -> Result<Vec<f32>, ModelError> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(PREDICT_CHUNK) {
            let batch = preprocess_batch(chunk, &self.spec);
            out.extend(self.predict_proba(&batch));
        }
        Ok(out)
    }

    /// One optimizer step over the head and any unfrozen extractor
    /// parameters. `layer_grads` comes from `Network::backward`.
    pub(crate) fn apply_step(
        &mut self,
        layer_grads: HashMap<usize, LayerGrad>,
        head_grad: (Array2<f32>, Array1<f32>),
        adam: &mut Adam,
        learning_rate: f32,
    ) {
        adam.step(
            (nn::HEAD_LAYER_ID, 0),
            learning_rate,
            self.head.weight.as_slice_mut().unwrap(),
            head_grad.0.as_slice().unwrap(),
        );
        adam.step(
            (nn::HEAD_LAYER_ID, 1),
            learning_rate,
            self.head.bias.as_slice_mut().unwrap(),
            head_grad.1.as_slice().unwrap(),
        );
        // Deterministic order: ascending layer index.
        let mut indices: Vec<usize> = layer_grads.keys().copied().collect();
        indices.sort_unstable();
        for idx in indices {
            match (&mut self.backbone.layers[idx], &layer_grads[&idx]) {
                (nn::Layer::Conv2d(conv), LayerGrad::Conv2d { dweight, dbias }) => {
                    adam.step(
                        (idx, 0),
                        learning_rate,
                        conv.weight.as_slice_mut().unwrap(),
                        dweight.as_slice().unwrap(),
                    );
                    adam.step(
                        (idx, 1),
                        learning_rate,
                        conv.bias.as_slice_mut().unwrap(),
                        dbias.as_slice().unwrap(),
                    );
                }
                (nn::Layer::BatchNorm(bn), LayerGrad::BatchNorm { dgamma, dbeta }) => {
                    adam.step(
                        (idx, 0),
                        learning_rate,
                        bn.gamma.as_slice_mut().unwrap(),
                        dgamma.as_slice().unwrap(),
                    );
                    adam.step(
                        (idx, 1),
                        learning_rate,
                        bn.beta.as_slice_mut().unwrap(),
                        dbeta.as_slice().unwrap(),
                    );
                }
                _ => unreachable!("gradient kind matches layer kind"),
            }
        }
    }

    /// Loss and gradients for one preprocessed batch; pure except for
    /// the activation cache.
    pub(crate) fn loss_and_grads(
        &self,
        batch: &Array4<f32>,
        targets: &[f32],
    ) -> (
        f32,
        usize,
        HashMap<usize, LayerGrad>,
        (Array2<f32>, Array1<f32>),
    ) {
        let flags = self.layer_flags();
        let backbone_trains = flags.iter().any(|&f| f);
        // Cache activations only when the extractor needs gradients.
        let (features, acts) = if backbone_trains {
            let acts = self.backbone.forward_cached(batch);
            (acts.last().unwrap().clone(), Some(acts))
        } else {
            (self.backbone.forward(batch), None)
        };
        let pooled = global_avg_pool(&features);
        let logits_mat = self.head.forward(&pooled);
        let logits: Vec<f32> = logits_mat.column(0).to_vec();
        let (loss, dz) = nn::bce_with_logits(&logits, targets);
        let correct = logits
            .iter()
            .zip(targets)
            .filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5))
            .count();

        let d_logits = Array2::from_shape_vec((dz.len(), 1), dz).unwrap();
        let (dw_head, db_head, d_pooled) = self.head.backward(&pooled, &d_logits);
        let layer_grads = match acts {
            Some(acts) => {
                let d_features = global_avg_pool_backward(&d_pooled, features.dim());
                self.backbone.backward(&acts, d_features, &flags)
            }
            None => HashMap::new(),
        };
        (loss, correct, layer_grads, (dw_head, db_head))
    }

    /// Write a checkpoint archive capturing extractor, head, spec and
    /// trainability flags.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let header = ArchiveHeader {
            kind: ArchiveKind::Checkpoint,
            name: self.spec.name.clone(),
            feature_channels: self.feature_channels(),
            layers: self
                .backbone
                .layers
                .iter()
                .map(archive::layer_desc)
                .collect(),
            head_in_features: Some(self.head.weight.dim().1),
            trainable_units: Some(self.trainable_units.clone()),
            spec: Some(self.spec.clone()),
        };
        archive::write_archive(path, &header, &self.backbone, Some(&self.head))
    }

    /// Restore a model from a checkpoint archive.
    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let ParsedArchive {
            header,
            network,
            head,
        } = archive::read_archive(path)?;
        let bad = |msg: &str| ModelError::Archive {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if header.kind != ArchiveKind::Checkpoint {
            return Err(bad("expected a checkpoint archive, found a backbone"));
        }
        let head = head.ok_or_else(|| bad("checkpoint missing head weights"))?;
        let spec = header.spec.ok_or_else(|| bad("checkpoint missing spec"))?;
        let trainable_units = header
            .trainable_units
            .unwrap_or_else(|| vec![false; network.unit_count()]);
        if trainable_units.len() != network.unit_count() {
            return Err(bad("trainability flags do not match unit count"));
        }
        Ok(ClassifierModel {
            spec,
            backbone: network,
            head,
            trainable_units,
        })
    }
}

/// Write a small randomly initialized backbone archive. This is the
/// stand-in extractor used by tests, benchmarks and smoke runs; it goes
/// through exactly the same provider interface as the registered
/// backbones.
pub fn write_tiny_backbone(path: &Path, seed: u64) -> Result<BackboneSpec, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        nn::Layer::Conv2d(nn::conv_he_init(8, 3, 3, 1, 1, &mut rng)),
        nn::Layer::BatchNorm(nn::BatchNorm::identity(8)),
        nn::Layer::Relu,
        nn::Layer::MaxPool { size: 2, stride: 2 },
        nn::Layer::Conv2d(nn::conv_he_init(16, 8, 3, 1, 1, &mut rng)),
        nn::Layer::BatchNorm(nn::BatchNorm::identity(16)),
        nn::Layer::Relu,
        nn::Layer::MaxPool { size: 2, stride: 2 },
        nn::Layer::Conv2d(nn::conv_he_init(32, 16, 3, 1, 1, &mut rng)),
        nn::Layer::Relu,
    ];
    let network = Network { layers };
    let header = ArchiveHeader {
        kind: ArchiveKind::Backbone,
        name: "tinycnn".into(),
        feature_channels: 32,
        layers: network.layers.iter().map(archive::layer_desc).collect(),
        head_in_features: None,
        trainable_units: None,
        spec: None,
    };
    archive::write_archive(path, &header, &network, None)?;
    Ok(BackboneSpec {
        name: "tinycnn".into(),
        native_input_side: 48,
        layer_count: network.unit_count(),
        unfreeze_fraction: DEFAULT_UNFREEZE_FRACTION,
        pretrained_source: path.to_string_lossy().into_owned(),
        preprocessing: Normalization::imagenet_mean_std(),
    })
}
