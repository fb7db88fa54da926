//! Confusion counts, derived metrics and cross-replicate aggregation.
//!
//! Two aggregation routes are deliberately kept separate: metrics of
//! per-run confusion counts averaged afterwards (the reported numbers),
//! and metrics recomputed from run-averaged counts. The two do not
//! coincide for nonlinear metrics like F1, so both are exposed.

use std::path::Path;

use thiserror::Error;

use crate::dataset::{Label, PatchSample};
use crate::model::{ClassifierModel, ModelError};
use crate::trainer::RunHistory;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/truth length mismatch: {predicted} vs {truth}")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("degenerate evaluation: no positive truth and no positive predictions")]
    NoPositiveClass,
    #[error("no runs to aggregate")]
    EmptyRuns,
    #[error("fine-tune boost undefined for a single-phase history")]
    UndefinedBoost,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad evaluation record at {path}: {msg}")]
    Parse {
        path: std::path::PathBuf,
        msg: String,
    },
}

/// Binary confusion counts. Positive means crack present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix {
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    /// Samples whose truth label is positive.
    pub fn actual_positives(&self) -> u64 {
        self.true_positives + self.false_negatives
    }

    /// Samples whose truth label is negative.
    pub fn actual_negatives(&self) -> u64 {
        self.true_negatives + self.false_positives
    }

    /// Whether misses outnumber false alarms by more than a factor of
    /// two — the skew that matters when ranking detectors for survey use.
    pub fn misses_exceed_double_false_alarms(&self) -> bool {
        self.false_negatives > 2 * self.false_positives
    }
}

/// Confusion counts averaged across replicate runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanConfusion {
    pub true_positives: f64,
    pub false_positives: f64,
    pub true_negatives: f64,
    pub false_negatives: f64,
}

/// Average integer confusion matrices element-wise.
pub fn mean_confusion(runs: &[ConfusionMatrix]) -> Result<MeanConfusion, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let n = runs.len() as f64;
    Ok(MeanConfusion {
        true_positives: runs.iter().map(|c| c.true_positives as f64).sum::<f64>() / n,
        false_positives: runs.iter().map(|c| c.false_positives as f64).sum::<f64>() / n,
        true_negatives: runs.iter().map(|c| c.true_negatives as f64).sum::<f64>() / n,
        false_negatives: runs.iter().map(|c| c.false_negatives as f64).sum::<f64>() / n,
    })
}

/// Precision, recall, accuracy and F1 for one evaluation.
///
/// `precision` is `None` when no sample was predicted positive; that is
/// reported as undefined rather than coerced to zero, since degenerate
/// all-negative classifiers do occur in practice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub precision: Option<f64>,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn metrics_from_float_counts(
    tp: f64,
    fp: f64,
    tn: f64,
    fn_: f64,
) -> Result<MetricSet, EvalError> {
    let total = tp + fp + tn + fn_;
    if tp + fp == 0.0 && tp + fn_ == 0.0 {
        return Err(EvalError::NoPositiveClass);
    }
    let precision = if tp + fp == 0.0 {
        None
    } else {
        Some(tp / (tp + fp))
    };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let accuracy = (tp + tn) / total;
    let f1 = match precision {
        Some(p) if p + recall > 0.0 => 2.0 * p * recall / (p + recall),
        _ => 0.0,
    };
    Ok(MetricSet {
        precision,
        recall,
        accuracy,
        f1,
    })
}

/// Derive the four metrics from integer confusion counts.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricSet, EvalError> {
    metrics_from_float_counts(
        cm.true_positives as f64,
        cm.false_positives as f64,
        cm.true_negatives as f64,
        cm.false_negatives as f64,
    )
}

/// Derive metrics from run-averaged counts — the route that does NOT
/// match averaging per-run metrics for F1.
pub fn metrics_from_mean_confusion(cm: &MeanConfusion) -> Result<MetricSet, EvalError> {
    metrics_from_float_counts(
        cm.true_positives,
        cm.false_positives,
        cm.true_negatives,
        cm.false_negatives,
    )
}

/// Threshold probabilities into labels: positive iff `p >= threshold`.
pub fn classify_probabilities(probabilities: &[f32], threshold: f32) -> Vec<Label> {
    probabilities
        .iter()
        .map(|&p| {
            if p >= threshold {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect()
}

/// Run the classifier over samples in order and threshold the outputs.
pub fn predict_batch(
    model: &ClassifierModel,
    samples: &[PatchSample],
    threshold: f32,
) -> Result<Vec<Label>, EvalError> {
    let rasters: Vec<&image::RgbImage> = samples.iter().map(|s| &s.pixels).collect();
    let probs = model.predict_patches(&rasters)?;
    Ok(classify_probabilities(&probs, threshold))
}

/// Count the four confusion cells over aligned prediction/truth lists.
pub fn confusion_counts(
    predicted: &[Label],
    truth: &[Label],
) -> Result<ConfusionMatrix, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Label::Positive, Label::Positive) => cm.true_positives += 1,
            (Label::Positive, Label::Negative) => cm.false_positives += 1,
            (Label::Negative, Label::Negative) => cm.true_negatives += 1,
            (Label::Negative, Label::Positive) => cm.false_negatives += 1,
        }
    }
    Ok(cm)
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    pub sd: f64,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt()
    };
    MetricStat { mean, sd }
}

/// Cross-replicate aggregate: per-metric mean and sample (n-1) standard
/// deviation, computed over per-run metric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateStats {
    /// `None` when precision was undefined in every run.
    pub precision: Option<MetricStat>,
    pub recall: MetricStat,
    pub accuracy: MetricStat,
    pub f1: MetricStat,
    /// Mean (accuracy boost, loss reduction) attributable to fine-tuning.
    pub boost: Option<(f64, f64)>,
    /// Set when only one run was aggregated; SDs are 0 by convention then.
    pub single_run: bool,
}

/// Aggregate per-run metrics (not averaged counts) across replicates.
pub fn aggregate_runs(per_run: &[MetricSet]) -> Result<AggregateStats, EvalError> {
    if per_run.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let defined_precision: Vec<f64> = per_run.iter().filter_map(|m| m.precision).collect();
    let precision = if defined_precision.is_empty() {
        None
    } else {
        Some(stat(&defined_precision))
    };
    Ok(AggregateStats {
        precision,
        recall: stat(&per_run.iter().map(|m| m.recall).collect::<Vec<_>>()),
        accuracy: stat(&per_run.iter().map(|m| m.accuracy).collect::<Vec<_>>()),
        f1: stat(&per_run.iter().map(|m| m.f1).collect::<Vec<_>>()),
        boost: None,
        single_run: per_run.len() == 1,
    })
}

impl AggregateStats {
    /// Attach the mean fine-tune boost over per-run values.
    pub fn with_boost(mut self, boosts: &[(f64, f64)]) -> Self {
        if !boosts.is_empty() {
            let n = boosts.len() as f64;
            self.boost = Some((
                boosts.iter().map(|b| b.0).sum::<f64>() / n,
                boosts.iter().map(|b| b.1).sum::<f64>() / n,
            ));
        }
        self
    }
}

/// Validation-accuracy gain and loss drop attributable to phase 2.
///
/// Baseline is the last head-only epoch; the comparison point is the
/// final epoch.
pub fn finetune_boost(history: &RunHistory) -> Result<(f64, f64), EvalError> {
    let start = history.config.finetune_start_epoch;
    if start == 0 || start >= history.records.len() {
        return Err(EvalError::UndefinedBoost);
    }
    let before = &history.records[start - 1];
    let last = history
        .records
        .last()
        .ok_or(EvalError::UndefinedBoost)?;
    Ok((
        last.val_accuracy - before.val_accuracy,
        before.val_loss - last.val_loss,
    ))
}

/// Per-run evaluation result persisted by the `evaluate` command and
/// consumed by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
}

impl RunEvaluation {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self, EvalError> {
        Ok(RunEvaluation {
            confusion: cm,
            metrics: metrics_from_confusion(&cm)?,
        })
    }

    /// Write a single-row CSV at full precision.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let m = &self.metrics;
        let precision = match m.precision {
            Some(p) => format!("{p}"),
            None => "undefined".to_string(),
        };
        let body = format!(
            "tp,fp,tn,fn,precision,recall,accuracy,f1\n{},{},{},{},{},{},{},{}\n",
            self.confusion.true_positives,
            self.confusion.false_positives,
            self.confusion.true_negatives,
            self.confusion.false_negatives,
            precision,
            m.recall,
            m.accuracy,
            m.f1
        );
        std::fs::write(path, body).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse = |msg: String| EvalError::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse("empty file".into()))?;
        if header.trim() != "tp,fp,tn,fn,precision,recall,accuracy,f1" {
            return Err(parse(format!("unexpected header '{header}'")));
        }
        let row = lines.next().ok_or_else(|| parse("missing data row".into()))?;
        let fields: Vec<&str> = row.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(parse(format!("expected 8 fields, got {}", fields.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| parse(format!("{s}: {e}")));
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse(format!("{s}: {e}")));
        let confusion = ConfusionMatrix::new(
            int(fields[0])?,
            int(fields[1])?,
            int(fields[2])?,
            int(fields[3])?,
        );
        let precision = if fields[4] == "undefined" {
            None
        } else {
            Some(num(fields[4])?)
        };
        Ok(RunEvaluation {
            confusion,
            metrics: MetricSet {
                precision,
                recall: num(fields[5])?,
                accuracy: num(fields[6])?,
                f1: num(fields[7])?,
            },
        })
    }
}
