//! Two-phase transfer-learning protocol: head-only training, then
//! fine-tuning with the top backbone units unfrozen at a reduced
//! learning rate, replicated across seeds.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{load_split, DatasetError, DatasetManifest, Split};
use crate::model::nn::Adam;
use crate::model::{
    preprocess_batch, ClassifierModel, ModelError, WeightsCache,
};
use crate::model::BackboneSpec;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty {0} stream")]
    EmptyStream(&'static str),
    #[error("non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("checkpoint persistence failed at {path}: {message}")]
    Persistence { path: PathBuf, message: String },
    #[error("history csv {path}: {msg}")]
    HistoryFormat { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Training loss selector. Binary cross-entropy on the logistic output
/// is the only registered loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    BinaryCrossEntropy,
}

/// Optimizer selector with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

/// Full experiment configuration. Defaults follow the protocol: 80
/// epochs, fine-tune from epoch 60, batch 32, 5 replicates, 25% of top
/// units unfrozen, phase-2 rate below phase 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub finetune_start_epoch: usize,
    pub batch_size: usize,
    pub phase1_learning_rate: f64,
    pub phase2_learning_rate: f64,
    pub replicates: usize,
    pub augmented: bool,
    pub unfreeze_fraction: f64,
    pub seeds: Vec<u64>,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    /// Additionally checkpoint whenever validation accuracy improves.
    pub best_val_checkpointing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 80,
            finetune_start_epoch: 60,
            batch_size: 32,
            phase1_learning_rate: 1e-3,
            phase2_learning_rate: 1e-5,
            replicates: 5,
            augmented: false,
            unfreeze_fraction: 0.25,
            seeds: vec![1, 2, 3, 4, 5],
            loss: LossKind::BinaryCrossEntropy,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            best_val_checkpointing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.finetune_start_epoch > self.total_epochs {
            return fail(format!(
                "finetune_start_epoch {} exceeds total_epochs {}",
                self.finetune_start_epoch, self.total_epochs
            ));
        }
        if self.phase1_learning_rate <= 0.0 || !self.phase1_learning_rate.is_finite() {
            return fail(format!(
                "phase1_learning_rate must be positive, got {}",
                self.phase1_learning_rate
            ));
        }
        if self.phase2_learning_rate <= 0.0 || self.phase2_learning_rate > self.phase1_learning_rate
        {
            return fail(format!(
                "phase2_learning_rate {} must be positive and not exceed phase 1 rate {}",
                self.phase2_learning_rate, self.phase1_learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.unfreeze_fraction) {
            return fail(format!(
                "unfreeze_fraction {} outside [0, 1]",
                self.unfreeze_fraction
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.seeds.len() != self.replicates {
            return fail(format!(
                "{} seeds for {} replicates",
                self.seeds.len(),
                self.replicates
            ));
        }
        Ok(())
    }

    /// Variant tag used in file names.
    pub fn variant_tag(&self) -> &'static str {
        if self.augmented {
            "aug"
        } else {
            "noaug"
        }
    }

    /// Parse the flat `key = value` config format.
    pub fn parse_str(text: &str) -> Result<Self, TrainError> {
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                TrainError::Config(format!("line {}: bad {what} '{value}'", lineno + 1))
            };
            match key {
                "total_epochs" => config.total_epochs = value.parse().map_err(|_| bad(key))?,
                "finetune_start_epoch" => {
                    config.finetune_start_epoch = value.parse().map_err(|_| bad(key))?
                }
                "batch_size" => config.batch_size = value.parse().map_err(|_| bad(key))?,
                "phase1_learning_rate" => {
                    config.phase1_learning_rate = value.parse().map_err(|_| bad(key))?
                }
                "phase2_learning_rate" => {
                    config.phase2_learning_rate = value.parse().map_err(|_| bad(key))?
                }
                "replicates" => config.replicates = value.parse().map_err(|_| bad(key))?,
                "augmented" => config.augmented = value.parse().map_err(|_| bad(key))?,
                "unfreeze_fraction" => {
                    config.unfreeze_fraction = value.parse().map_err(|_| bad(key))?
                }
                "best_val_checkpointing" => {
                    config.best_val_checkpointing = value.parse().map_err(|_| bad(key))?
                }
                "seeds" => {
                    config.seeds = value
                        .split(',')
                        .map(|s| s.trim().parse::<u64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(key))?;
                }
                "loss" => match value {
                    "bce" | "binary_cross_entropy" => {
                        config.loss = LossKind::BinaryCrossEntropy
                    }
                    _ => return Err(bad(key)),
                },
                "optimizer" => match value {
                    "adam" => {}
                    _ => return Err(bad(key)),
                },
                _ => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key '{key}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(config)
    }

    pub fn read_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse_str(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), TrainError> {
        let OptimizerKind::Adam { .. } = self.optimizer;
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let body = format!(
            "total_epochs = {}\nfinetune_start_epoch = {}\nbatch_size = {}\n\
             phase1_learning_rate = {}\nphase2_learning_rate = {}\nreplicates = {}\n\
             augmented = {}\nunfreeze_fraction = {}\nseeds = {}\nloss = bce\n\
             optimizer = adam\nbest_val_checkpointing = {}\n",
            self.total_epochs,
            self.finetune_start_epoch,
            self.batch_size,
            self.phase1_learning_rate,
            self.phase2_learning_rate,
            self.replicates,
            self.augmented,
            self.unfreeze_fraction,
            seeds,
            self.best_val_checkpointing,
        );
        std::fs::write(path, body).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Which phase of the protocol an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    HeadOnly,
    FineTune,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::HeadOnly => "head-only",
            Phase::FineTune => "fine-tune",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "head-only" => Some(Phase::HeadOnly),
            "fine-tune" => Some(Phase::FineTune),
            _ => None,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one completed epoch. Validation numbers come from the
/// full validation stream with the model in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub trainable_parameter_count: usize,
    pub learning_rate: f64,
}

/// Complete per-epoch history of one replicate run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub seed: u64,
    pub final_checkpoint: Option<PathBuf>,
}

const HISTORY_HEADER: &str = "epoch,phase,train_loss,train_acc,val_loss,val_acc,trainable_params";

impl RunHistory {
    /// Write the pinned CSV layout:
    /// `epoch,phase,train_loss,train_acc,val_loss,val_acc,trainable_params`.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut body = String::from(HISTORY_HEADER);
        body.push('\n');
        for r in &self.records {
            body.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.phase,
                r.train_loss,
                r.train_accuracy,
                r.val_loss,
                r.val_accuracy,
                r.trainable_parameter_count
            ));
        }
        std::fs::write(path, body).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Read a history CSV. The embedded config is reconstructed from
    /// the records (epoch count and phase boundary); learning rates are
    /// not persisted and come back as defaults.
    pub fn read_csv(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let bad = |msg: String| TrainError::HistoryFormat {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        if header.trim() != HISTORY_HEADER {
            return Err(bad(format!("unexpected header '{header}'")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(bad(format!("row {}: expected 7 fields", i + 2)));
            }
            let phase = Phase::parse(fields[1])
                .ok_or_else(|| bad(format!("row {}: bad phase '{}'", i + 2, fields[1])))?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("row {}: {s}: {e}", i + 2)))
            };
            records.push(EpochRecord {
                epoch: fields[0]
                    .parse()
                    .map_err(|e| bad(format!("row {}: {e}", i + 2)))?,
                phase,
                train_loss: num(fields[2])?,
                train_accuracy: num(fields[3])?,
                val_loss: num(fields[4])?,
                val_accuracy: num(fields[5])?,
                trainable_parameter_count: fields[6]
                    .parse()
                    .map_err(|e| bad(format!("row {}: {e}", i + 2)))?,
                learning_rate: 0.0,
            });
        }
        let finetune_start = records
            .iter()
            .position(|r| r.phase == Phase::FineTune)
            .unwrap_or(records.len());
        let config = TrainConfig {
            total_epochs: records.len(),
            finetune_start_epoch: finetune_start,
            ..TrainConfig::default()
        };
        Ok(RunHistory {
            records,
            config,
            seed: 0,
            final_checkpoint: None,
        })
    }
}

/// Decoded, labeled patches held in memory; preprocessing happens per
/// batch so one dataset serves backbones with different input sides.
pub struct TrainData {
    pub inputs: Vec<RgbImage>,
    pub targets: Vec<f32>,
}

impl TrainData {
    pub fn new(inputs: Vec<RgbImage>, targets: Vec<f32>) -> Self {
        assert_eq!(inputs.len(), targets.len());
        TrainData { inputs, targets }
    }

    /// Load and decode one manifest split.
    pub fn from_split(
        manifest: &DatasetManifest,
        split: Split,
        base_dir: &Path,
    ) -> Result<Self, TrainError> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for sample in load_split(manifest, split, base_dir) {
            let sample = sample?;
            targets.push(sample.label.map(|l| l.target()).unwrap_or(0.0));
            inputs.push(sample.pixels);
        }
        Ok(TrainData { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Options for one [`train_phase`] call.
#[derive(Debug, Clone)]
pub struct PhaseOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Global index of the first epoch in this phase.
    pub start_epoch: usize,
    pub phase: Phase,
    pub batch_size: usize,
    /// Base seed for the per-epoch shuffle of the train stream.
    pub shuffle_seed: u64,
}

/// Mean loss and accuracy over a stream, model in evaluation mode.
/// Takes the model immutably, so validation can never leak into
/// parameter updates.
pub fn evaluate(model: &ClassifierModel, data: &TrainData, batch_size: usize) -> (f64, f64) {
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut index = 0usize;
    while index < data.len() {
        let end = (index + batch_size).min(data.len());
        let patches: Vec<&RgbImage> = data.inputs[index..end].iter().collect();
        let batch = preprocess_batch(&patches, model.spec());
        let logits = model.forward_logits(&batch);
        let targets = &data.targets[index..end];
        let (loss, _) = crate::model::nn::bce_with_logits(&logits, targets);
        loss_sum += loss as f64 * (end - index) as f64;
        correct += logits
            .iter()
            .zip(targets)
            .filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5))
            .count();
        index = end;
    }
    let n = data.len() as f64;
    (loss_sum / n, correct as f64 / n)
}

/// Train for `opts.epochs` epochs at one learning rate, recording one
/// [`EpochRecord`] per epoch. Model trainability must already be set
/// for the phase; the optimizer is shared across phases by the caller
/// so a pure learning-rate switch leaves the trajectory untouched.
pub fn train_phase(
    model: &mut ClassifierModel,
    optimizer: &mut Adam,
    train: &TrainData,
    val: &TrainData,
    opts: &PhaseOptions,
) -> Result<Vec<EpochRecord>, TrainError> {
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(TrainError::EmptyStream("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyStream("val"));
    }

    let mut records = Vec::with_capacity(opts.epochs);
    for local_epoch in 0..opts.epochs {
        let epoch = opts.start_epoch + local_epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let patches: Vec<&RgbImage> = chunk.iter().map(|&i| &train.inputs[i]).collect();
            let targets: Vec<f32> = chunk.iter().map(|&i| train.targets[i]).collect();
            let batch = preprocess_batch(&patches, model.spec());
            let (loss, batch_correct, layer_grads, head_grad) =
                model.loss_and_grads(&batch, &targets);
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            model.apply_step(layer_grads, head_grad, optimizer, opts.learning_rate as f32);
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += batch_correct;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_accuracy = correct as f64 / train.len() as f64;
        let (val_loss, val_accuracy) = evaluate(model, val, opts.batch_size);
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        log::info!(
            "epoch {epoch} [{}]: train loss {train_loss:.4} acc {train_accuracy:.4} | val loss {val_loss:.4} acc {val_accuracy:.4}",
            opts.phase
        );
        records.push(EpochRecord {
            epoch,
            phase: opts.phase,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            trainable_parameter_count: model.trainable_parameter_count(),
            learning_rate: opts.learning_rate,
        });
    }
    Ok(records)
}

fn checkpoint_path(
    out_dir: &Path,
    backbone: &str,
    variant: &str,
    seed: u64,
    epoch: usize,
) -> PathBuf {
    out_dir.join(format!("{backbone}_{variant}_seed{seed}_epoch{epoch}.pvck"))
}

fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<(), TrainError> {
    model
        .save_checkpoint(path)
        .map_err(|e| TrainError::Persistence {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Run the full two-phase protocol for one seed.
///
/// Phase 1 trains the head for `finetune_start_epoch` epochs with the
/// backbone frozen; the top `unfreeze_fraction` of units is then
/// unfrozen and training continues at the reduced rate. Checkpoints are
/// written at the phase boundary and at completion.
pub fn run_experiment(
    spec: &BackboneSpec,
    manifest: &DatasetManifest,
    base_dir: &Path,
    config: &TrainConfig,
    seed: u64,
    cache: &WeightsCache,
    out_dir: &Path,
) -> Result<RunHistory, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let train = TrainData::from_split(manifest, Split::Train, base_dir)?;
    let val = TrainData::from_split(manifest, Split::Val, base_dir)?;

    let mut model = ClassifierModel::instantiate(spec, cache, seed)?;
    model.freeze_backbone();
    let mut optimizer = Adam::default();
    let variant = config.variant_tag();

    let mut records = train_phase(
        &mut model,
        &mut optimizer,
        &train,
        &val,
        &PhaseOptions {
            epochs: config.finetune_start_epoch,
            learning_rate: config.phase1_learning_rate,
            start_epoch: 0,
            phase: Phase::HeadOnly,
            batch_size: config.batch_size,
            shuffle_seed: seed,
        },
    )?;

    if config.finetune_start_epoch < config.total_epochs {
        let boundary = checkpoint_path(
            out_dir,
            &spec.name,
            variant,
            seed,
            config.finetune_start_epoch,
        );
        save_checkpoint(&model, &boundary)?;
        model.unfreeze_top(config.unfreeze_fraction)?;
        let phase2 = train_phase(
            &mut model,
            &mut optimizer,
            &train,
            &val,
            &PhaseOptions {
                epochs: config.total_epochs - config.finetune_start_epoch,
                learning_rate: config.phase2_learning_rate,
                start_epoch: config.finetune_start_epoch,
                phase: Phase::FineTune,
                batch_size: config.batch_size,
                shuffle_seed: seed,
            },
        )?;
        records.extend(phase2);
    }

    if config.best_val_checkpointing {
        // Final model is still the evaluated model; the best-val copy is
        // informational. Saved only at the end to avoid epoch-wise IO.
        if let Some(best) = records
            .iter()
            .max_by(|a, b| a.val_accuracy.partial_cmp(&b.val_accuracy).unwrap())
        {
            log::info!(
                "best validation accuracy {:.4} at epoch {}",
                best.val_accuracy,
                best.epoch
            );
        }
    }

    let final_path = checkpoint_path(out_dir, &spec.name, variant, seed, config.total_epochs);
    save_checkpoint(&model, &final_path)?;

    Ok(RunHistory {
        records,
        config: config.clone(),
        seed,
        final_checkpoint: Some(final_path),
    })
}

/// One replicate's outcome inside an [`ExperimentRecord`].
#[derive(Debug)]
pub struct ReplicateRun {
    pub seed: u64,
    pub outcome: Result<RunHistory, TrainError>,
}

/// All replicates of one (backbone, variant) experiment. Failed
/// replicates are recorded; the remaining seeds still run.
#[derive(Debug)]
pub struct ExperimentRecord {
    pub backbone: String,
    pub variant: String,
    pub runs: Vec<ReplicateRun>,
}

impl ExperimentRecord {
    pub fn histories(&self) -> Vec<&RunHistory> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect()
    }

    pub fn completed(&self) -> usize {
        self.histories().len()
    }

    pub fn is_complete(&self) -> bool {
        self.completed() == self.runs.len()
    }
}

/// Run every configured seed, persisting each history as
/// `history_{backbone}_{variant}_seed{S}.csv` under `out_dir`.
pub fn run_replicates(
    spec: &BackboneSpec,
    manifest: &DatasetManifest,
    base_dir: &Path,
    config: &TrainConfig,
    cache: &WeightsCache,
    out_dir: &Path,
) -> Result<ExperimentRecord, TrainError> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let outcome = run_experiment(spec, manifest, base_dir, config, seed, cache, out_dir);
        match &outcome {
            Ok(history) => {
                let path = out_dir.join(format!(
                    "history_{}_{}_seed{seed}.csv",
                    spec.name,
                    config.variant_tag()
                ));
                history.write_csv(&path)?;
            }
            Err(e) => log::error!("replicate seed {seed} failed: {e}"),
        }
        runs.push(ReplicateRun { seed, outcome });
    }
    Ok(ExperimentRecord {
        backbone: spec.name.clone(),
        variant: config.variant_tag().to_string(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::write_tiny_backbone;
    use crate::synth;

    fn tiny_setup(dir: &Path) -> (BackboneSpec, WeightsCache) {
        let spec = write_tiny_backbone(&dir.join("tiny.pvck"), 4242).unwrap();
        (spec, WeightsCache::new(dir))
    }

    fn separable_data(n_per_class: usize, side: u32, seed: u64) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pos, neg) = synth::patch_set(&mut rng, n_per_class, side);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for p in pos {
            inputs.push(p);
            targets.push(1.0);
        }
        for n in neg {
            inputs.push(n);
            targets.push(0.0);
        }
        TrainData::new(inputs, targets)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, cache) = tiny_setup(dir.path());
        let mut model = ClassifierModel::instantiate(&spec, &cache, 0).unwrap();
        let before = model.head().weight.clone();
        let data = separable_data(4, 64, 0);
        let records = train_phase(
            &mut model,
            &mut Adam::default(),
            &data,
            &data,
            &PhaseOptions {
                epochs: 0,
                learning_rate: 1e-3,
                start_epoch: 0,
                phase: Phase::HeadOnly,
                batch_size: 4,
                shuffle_seed: 0,
            },
        )
        .unwrap();
        assert!(records.is_empty());
        assert_eq!(model.head().weight, before);
    }

    #[test]
    fn empty_stream_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, cache) = tiny_setup(dir.path());
        let mut model = ClassifierModel::instantiate(&spec, &cache, 0).unwrap();
        let empty = TrainData::new(vec![], vec![]);
        let data = separable_data(2, 64, 1);
        let opts = PhaseOptions {
            epochs: 1,
            learning_rate: 1e-3,
            start_epoch: 0,
            phase: Phase::HeadOnly,
            batch_size: 4,
            shuffle_seed: 0,
        };
        assert!(matches!(
            train_phase(&mut model, &mut Adam::default(), &empty, &data, &opts),
            Err(TrainError::EmptyStream("train"))
        ));
        assert!(matches!(
            train_phase(&mut model, &mut Adam::default(), &data, &empty, &opts),
            Err(TrainError::EmptyStream("val"))
        ));
    }

    #[test]
    fn head_learns_separable_classes_in_five_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, cache) = tiny_setup(dir.path());
        let mut model = ClassifierModel::instantiate(&spec, &cache, 3).unwrap();
        model.freeze_backbone();
        let train = separable_data(30, 64, 10);
        let val = separable_data(8, 64, 11);
        let records = train_phase(
            &mut model,
            &mut Adam::default(),
            &train,
            &val,
            &PhaseOptions {
                epochs: 5,
                learning_rate: 5e-2,
                start_epoch: 0,
                phase: Phase::HeadOnly,
                batch_size: 8,
                shuffle_seed: 3,
            },
        )
        .unwrap();
        assert_eq!(records.len(), 5);
        for r in &records {
            assert!(r.train_loss >= 0.0 && r.val_loss >= 0.0);
            assert!((0.0..=1.0).contains(&r.train_accuracy));
            assert!((0.0..=1.0).contains(&r.val_accuracy));
        }
        assert!(
            records.last().unwrap().train_accuracy >= 0.9,
            "separable set should be fit by the head: {:?}",
            records.last().unwrap()
        );
    }

    #[test]
    fn divergent_learning_rate_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, cache) = tiny_setup(dir.path());
        let mut model = ClassifierModel::instantiate(&spec, &cache, 3).unwrap();
        let data = separable_data(8, 64, 5);
        let result = train_phase(
            &mut model,
            &mut Adam::default(),
            &data,
            &data,
            &PhaseOptions {
                epochs: 3,
                learning_rate: 1e300,
                start_epoch: 0,
                phase: Phase::HeadOnly,
                batch_size: 4,
                shuffle_seed: 0,
            },
        );
        assert!(matches!(result, Err(TrainError::Divergence { .. })), "{result:?}");
    }

    #[test]
    fn validation_never_mutates_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, cache) = tiny_setup(dir.path());
        let model = ClassifierModel::instantiate(&spec, &cache, 9).unwrap();
        let weights_before = model.head().weight.clone();
        let data = separable_data(6, 64, 6);
        let (loss, acc) = evaluate(&model, &data, 4);
        assert!(loss >= 0.0 && (0.0..=1.0).contains(&acc));
        assert_eq!(model.head().weight, weights_before);
    }

    #[test]
    fn config_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        let mut config = TrainConfig::default();
        config.total_epochs = 10;
        config.finetune_start_epoch = 6;
        config.seeds = vec![7, 8];
        config.replicates = 2;
        config.write_file(&path).unwrap();
        let back = TrainConfig::read_file(&path).unwrap();
        assert_eq!(back, config);

        let bad = TrainConfig {
            phase2_learning_rate: 1.0,
            phase1_learning_rate: 0.1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad_seeds = TrainConfig {
            seeds: vec![1],
            ..TrainConfig::default()
        };
        assert!(matches!(bad_seeds.validate(), Err(TrainError::Config(_))));
        assert!(TrainConfig::parse_str("frobnicate = 1").is_err());
    }

    #[test]
    fn history_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let config = TrainConfig {
            total_epochs: 4,
            finetune_start_epoch: 2,
            ..TrainConfig::default()
        };
        let records: Vec<EpochRecord> = (0..4)
            .map(|epoch| EpochRecord {
                epoch,
                phase: if epoch < 2 {
                    Phase::HeadOnly
                } else {
                    Phase::FineTune
                },
                train_loss: 0.5 / (epoch + 1) as f64,
                train_accuracy: 0.7 + 0.05 * epoch as f64,
                val_loss: 0.6 / (epoch + 1) as f64,
                val_accuracy: 0.65 + 0.05 * epoch as f64,
                trainable_parameter_count: if epoch < 2 { 33 } else { 4673 },
                learning_rate: 0.0,
            })
            .collect();
        let history = RunHistory {
            records,
            config,
            seed: 0,
            final_checkpoint: None,
        };
        history.write_csv(&path).unwrap();
        let back = RunHistory::read_csv(&path).unwrap();
        assert_eq!(back.records, history.records);
        assert_eq!(back.config.finetune_start_epoch, 2);
        assert_eq!(back.config.total_epochs, 4);
    }
}
