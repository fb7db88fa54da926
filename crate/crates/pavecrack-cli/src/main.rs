//! `pavecrack`: dataset building, augmentation, two-phase training,
//! evaluation, reporting and tiled inference for road crack detection.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error.
//! Structured logs go to stderr; only `validate` prints results to
//! stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pavecrack_core::augment::{expand_dataset, TransformSet};
use pavecrack_core::dataset::{
    build_manifest, decode_frame, extract_patches, validate_manifest, BuildOptions,
    DatasetManifest, GridSpec, SampleRef, Split, ValidateOptions,
};
use pavecrack_core::evaluation::{
    aggregate_runs, confusion_counts, finetune_boost, mean_confusion, predict_batch,
    RunEvaluation,
};
use pavecrack_core::inference::{classify_frame, render_overlay, write_detections, Detection};
use pavecrack_core::model::{
    archive, lookup_backbone, BackboneSpec, ClassifierModel, Normalization, WeightsCache,
};
use pavecrack_core::reporting::{
    build_curves, emit_tables, render_plots, write_curves_csv, ExperimentSummary, Variant,
};
use pavecrack_core::trainer::{run_replicates, RunHistory, TrainConfig};

#[derive(Parser)]
#[command(
    name = "pavecrack",
    version,
    about = "Binary crack detection toolkit for road survey imagery"
)]
struct Cli {
    /// Pretrained-weights cache directory (default: $PAVECRACK_CACHE or ./weights).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Patch grid as ROWSxCOLS, e.g. 2x6.
    #[arg(long, default_value = "2x6")]
    grid: String,
    /// Square patch side in pixels.
    #[arg(long, default_value_t = 200)]
    patch_size: u32,
}

impl GridArgs {
    fn rows_cols(&self) -> Result<(u32, u32)> {
        let (r, c) = self
            .grid
            .split_once(['x', 'X'])
            .with_context(|| format!("--grid must be ROWSxCOLS, got '{}'", self.grid))?;
        Ok((
            r.parse().with_context(|| format!("bad rows '{r}'"))?,
            c.parse().with_context(|| format!("bad cols '{c}'"))?,
        ))
    }

    fn for_frame(&self, width: u32, height: u32) -> Result<GridSpec> {
        let (rows, cols) = self.rows_cols()?;
        GridSpec::centered_lower(rows, cols, self.patch_size, width, height)
            .map_err(anyhow::Error::from)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract patches from survey frames and/or assemble a balanced,
    /// split manifest from labeled patch directories.
    BuildDataset {
        /// Directory of full survey frames; patches are written next to
        /// the manifest under `unlabeled/` for hand labeling.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Directory of crack patches.
        #[arg(long)]
        pos: Option<PathBuf>,
        /// Directory of crack-free patches.
        #[arg(long)]
        neg: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Train/val/test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
        /// Allow patches of one source frame to land in different splits.
        #[arg(long)]
        no_frame_separation: bool,
        /// Cap the manifest at this many samples (even number).
        #[arg(long)]
        total: Option<usize>,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand manifest splits by deterministic flips and rotations.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest path (same directory as the input).
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated transform tags; identity is always included.
        #[arg(long, default_value = "hflip,vflip,rot90,rot180,rot270")]
        transforms: String,
        /// Splits to expand.
        #[arg(long, default_value = "train")]
        splits: String,
    },
    /// Run the two-phase fine-tuning protocol across replicates.
    Train {
        /// Registry name (e.g. VGG16) or path to a backbone archive.
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Experiment config file (flat key = value); defaults apply
        /// when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mark the run as the augmented variant (command line wins
        /// over the config file).
        #[arg(long)]
        augmented: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on one manifest split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate training histories and evaluations into tables,
    /// curves and optional figures.
    Report {
        /// Directory holding history_*.csv and eval_*.csv files.
        #[arg(long)]
        experiments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also render accuracy/loss figures per experiment.
        #[arg(long)]
        plots: bool,
    },
    /// Classify full frames tile by tile and write overlays plus
    /// newline-delimited detection records.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a manifest against the dataset invariants.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Skip checking that sample files exist on disk.
        #[arg(long)]
        no_check_files: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        log::error!("{err:#}");
        std::process::exit(1);
    }
}

fn cache_dir(flag: Option<PathBuf>) -> WeightsCache {
    let dir = flag
        .or_else(|| std::env::var_os("PAVECRACK_CACHE").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weights"));
    WeightsCache::new(dir)
}

fn run(cli: Cli) -> Result<()> {
    let cache = cache_dir(cli.cache);
    match cli.command {
        Command::BuildDataset {
            frames,
            pos,
            neg,
            grid,
            seed,
            fractions,
            no_frame_separation,
            total,
            out,
        } => build_dataset(
            frames,
            pos,
            neg,
            grid,
            seed,
            &fractions,
            no_frame_separation,
            total,
            &out,
        ),
        Command::Augment {
            manifest,
            out,
            transforms,
            splits,
        } => augment(&manifest, &out, &transforms, &splits),
        Command::Train {
            backbone,
            manifest,
            config,
            augmented,
            out_dir,
        } => train(&backbone, &manifest, config.as_deref(), augmented, &out_dir, &cache),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            threshold,
            out,
        } => evaluate_cmd(&checkpoint, &manifest, &split, threshold, &out),
        Command::Report {
            experiments,
            out,
            plots,
        } => report(&experiments, &out, plots),
        Command::Infer {
            checkpoint,
            frames,
            grid,
            threshold,
            out,
        } => infer(&checkpoint, &frames, &grid, threshold, &out),
        Command::Validate {
            manifest,
            no_check_files,
        } => validate(&manifest, no_check_files),
    }
}

/// Sorted image files (png/jpg) directly inside `dir`.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Recover tiling provenance from an extracted-patch file name of the
/// form `{frame}__r{row}c{col}`.
fn sample_ref_for(path_in_manifest: String, file: &Path) -> SampleRef {
    let name = stem(file);
    if let Some((frame, coords)) = name.rsplit_once("__r") {
        if let Some((row, col)) = coords.split_once('c') {
            if let (Ok(row), Ok(col)) = (row.parse(), col.parse()) {
                return SampleRef {
                    path: path_in_manifest,
                    source_frame_id: frame.to_string(),
                    grid_row: row,
                    grid_col: col,
                    transform_tag: "identity".into(),
                };
            }
        }
    }
    let mut r = SampleRef::from_path(path_in_manifest);
    r.source_frame_id = name;
    r
}

fn manifest_relative(manifest_dir: &Path, file: &Path) -> String {
    file.strip_prefix(manifest_dir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| file.to_string_lossy().into_owned())
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("--fractions must be three numbers, got '{s}'"))?;
    if parts.len() != 3 {
        bail!("--fractions must have exactly three components, got '{s}'");
    }
    Ok((parts[0], parts[1], parts[2]))
}

#[allow(clippy::too_many_arguments)]
fn build_dataset(
    frames: Option<PathBuf>,
    pos: Option<PathBuf>,
    neg: Option<PathBuf>,
    grid: GridArgs,
    seed: u64,
    fractions: &str,
    no_frame_separation: bool,
    total: Option<usize>,
    out: &Path,
) -> Result<()> {
    let manifest_dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&manifest_dir)?;

    if let Some(frames_dir) = frames {
        let unlabeled = manifest_dir.join("unlabeled");
        std::fs::create_dir_all(&unlabeled)?;
        let files = image_files(&frames_dir)?;
        if files.is_empty() {
            bail!("no frames found in {}", frames_dir.display());
        }
        let mut written = 0usize;
        for file in &files {
            let frame = decode_frame(file)?;
            let spec = grid.for_frame(frame.width(), frame.height())?;
            let frame_id = stem(file);
            for patch in extract_patches(&frame, &spec, &frame_id)? {
                let name = format!(
                    "{frame_id}__r{}c{}.png",
                    patch.grid_row, patch.grid_col
                );
                patch.pixels.save(unlabeled.join(name))?;
                written += 1;
            }
        }
        log::info!(
            "extracted {written} patches from {} frames into {}",
            files.len(),
            unlabeled.display()
        );
    }

    let (pos, neg) = match (pos, neg) {
        (Some(p), Some(n)) => (p, n),
        (None, None) => {
            log::info!("no --pos/--neg given; skipping manifest assembly");
            return Ok(());
        }
        _ => bail!("--pos and --neg must be given together"),
    };

    let collect = |dir: &Path| -> Result<Vec<SampleRef>> {
        Ok(image_files(dir)?
            .iter()
            .map(|f| sample_ref_for(manifest_relative(&manifest_dir, f), f))
            .collect())
    };
    let positives = collect(&pos)?;
    let negatives = collect(&neg)?;
    log::info!(
        "assembling manifest from {} positive / {} negative patches",
        positives.len(),
        negatives.len()
    );
    let manifest = build_manifest(
        &positives,
        &negatives,
        parse_fractions(fractions)?,
        seed,
        &BuildOptions {
            frame_separation: !no_frame_separation,
            total_size: total,
        },
    )?;
    manifest.write(out)?;
    let counts = manifest.split_counts();
    log::info!(
        "wrote {} ({} train / {} val / {} test)",
        out.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn augment(manifest_path: &Path, out: &Path, transforms: &str, splits: &str) -> Result<()> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if out.parent().unwrap_or(Path::new(".")) != base {
        bail!(
            "output manifest must live next to the input so relative sample paths stay valid"
        );
    }
    let manifest = DatasetManifest::read(manifest_path)?;
    let set = TransformSet::parse_list(transforms)?;
    let splits: Vec<Split> = splits
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Split::parse(s).with_context(|| format!("unknown split '{s}'")))
        .collect::<Result<_>>()?;
    let expanded = expand_dataset(&manifest, &set, &splits, base)?;
    expanded.write(out)?;
    let counts = expanded.split_counts();
    log::info!(
        "expanded by factor {}: {} train / {} val / {} test -> {}",
        set.len(),
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

/// Registry name, or a path to a backbone archive for stand-in runs.
fn resolve_backbone(arg: &str, cache: &WeightsCache) -> Result<BackboneSpec> {
    if let Ok(spec) = lookup_backbone(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if path.is_file() {
        let parsed = archive::read_archive(path)?;
        log::info!(
            "using backbone archive {} ('{}', {} units)",
            path.display(),
            parsed.header.name,
            parsed.network.unit_count()
        );
        return Ok(BackboneSpec {
            name: parsed.header.name,
            native_input_side: 48,
            layer_count: parsed.network.unit_count(),
            unfreeze_fraction: pavecrack_core::model::DEFAULT_UNFREEZE_FRACTION,
            pretrained_source: path.to_string_lossy().into_owned(),
            preprocessing: Normalization::imagenet_mean_std(),
        });
    }
    let _ = cache;
    bail!("'{arg}' is neither a registered backbone nor an archive file")
}

fn train(
    backbone: &str,
    manifest_path: &Path,
    config_path: Option<&Path>,
    augmented: bool,
    out_dir: &Path,
    cache: &WeightsCache,
) -> Result<()> {
    let spec = resolve_backbone(backbone, cache)?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut config = match config_path {
        Some(p) => TrainConfig::read_file(p)?,
        None => TrainConfig::default(),
    };
    if augmented {
        config.augmented = true;
    }
    let record = run_replicates(&spec, &manifest, base, &config, cache, out_dir)?;
    if !record.is_complete() {
        bail!(
            "{}/{} replicates failed; see logs",
            record.runs.len() - record.completed(),
            record.runs.len()
        );
    }
    log::info!(
        "trained {} x{} replicates; histories and checkpoints in {}",
        spec.name,
        record.runs.len(),
        out_dir.display()
    );
    Ok(())
}

/// `{backbone}_{variant}_seed{S}` from a checkpoint or history stem.
fn parse_run_key(stem: &str) -> Option<(String, String, u64)> {
    let (rest, seed_part) = stem.rsplit_once("_seed")?;
    let seed = seed_part
        .split(|c: char| !c.is_ascii_digit())
        .next()?
        .parse()
        .ok()?;
    let (backbone, variant) = rest.rsplit_once('_')?;
    Variant::from_tag(variant)?;
    Some((backbone.to_string(), variant.to_string(), seed))
}

fn evaluate_cmd(
    checkpoint: &Path,
    manifest_path: &Path,
    split: &str,
    threshold: f32,
    out: &Path,
) -> Result<()> {
    let split = Split::parse(split).with_context(|| format!("unknown split '{split}'"))?;
    let model = ClassifierModel::load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut samples = Vec::new();
    for s in pavecrack_core::dataset::load_split(&manifest, split, base) {
        samples.push(s?);
    }
    if samples.is_empty() {
        bail!("split '{split}' is empty");
    }
    let truth: Vec<_> = samples.iter().filter_map(|s| s.label).collect();
    let predicted = predict_batch(&model, &samples, threshold)?;
    let confusion = confusion_counts(&predicted, &truth)?;
    let run = RunEvaluation::from_confusion(confusion)?;

    std::fs::create_dir_all(out)?;
    let name = match parse_run_key(&stem(checkpoint)) {
        Some((backbone, variant, seed)) => format!("eval_{backbone}_{variant}_seed{seed}.csv"),
        None => format!("eval_{}.csv", stem(checkpoint)),
    };
    let path = out.join(name);
    run.write_csv(&path)?;
    let m = &run.metrics;
    log::info!(
        "split {split}: tp {} fp {} tn {} fn {} | precision {} recall {:.4} accuracy {:.4} f1 {:.4} -> {}",
        confusion.true_positives,
        confusion.false_positives,
        confusion.true_negatives,
        confusion.false_negatives,
        m.precision
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "undefined".into()),
        m.recall,
        m.accuracy,
        m.f1,
        path.display()
    );
    Ok(())
}

fn report(experiments: &Path, out: &Path, plots: bool) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut histories: BTreeMap<(String, String), Vec<(u64, RunHistory)>> = BTreeMap::new();
    let mut evals: BTreeMap<(String, String), Vec<(u64, RunEvaluation)>> = BTreeMap::new();

    for entry in std::fs::read_dir(experiments)
        .with_context(|| format!("reading {}", experiments.display()))?
    {
        let path = entry?.path();
        let name = stem(&path);
        if let Some(rest) = name.strip_prefix("history_") {
            if let Some((backbone, variant, seed)) = parse_run_key(rest) {
                let history = RunHistory::read_csv(&path)?;
                histories
                    .entry((backbone, variant))
                    .or_default()
                    .push((seed, history));
            }
        } else if let Some(rest) = name.strip_prefix("eval_") {
            if let Some((backbone, variant, seed)) = parse_run_key(rest) {
                let eval = RunEvaluation::read_csv(&path)?;
                evals
                    .entry((backbone, variant))
                    .or_default()
                    .push((seed, eval));
            }
        }
    }
    if histories.is_empty() && evals.is_empty() {
        bail!("no history_*.csv or eval_*.csv files in {}", experiments.display());
    }

    // Curves and figures per experiment.
    for ((backbone, variant), runs) in &mut histories {
        runs.sort_by_key(|(seed, _)| *seed);
        let refs: Vec<&RunHistory> = runs.iter().map(|(_, h)| h).collect();
        let band = build_curves(&refs)?;
        let tag = format!("{backbone}_{variant}");
        write_curves_csv(&band, &out.join(format!("curves_{tag}.csv")))?;
        if plots {
            let dir = out.join(&tag);
            let files = render_plots(&band, &dir)?;
            log::info!("figures: {} / {}", files.accuracy.display(), files.loss.display());
        }
    }

    // Tables across experiments that have evaluations.
    let mut summaries = Vec::new();
    for ((backbone, variant_tag), runs) in &evals {
        let variant = Variant::from_tag(variant_tag).expect("validated by parse_run_key");
        let per_run: Vec<_> = runs.iter().map(|(_, e)| e.metrics).collect();
        let confusions: Vec<_> = runs.iter().map(|(_, e)| e.confusion).collect();
        let mut stats = aggregate_runs(&per_run)?;
        if let Some(history_runs) = histories.get(&(backbone.clone(), variant_tag.clone())) {
            let boosts: Vec<(f64, f64)> = history_runs
                .iter()
                .filter_map(|(_, h)| finetune_boost(h).ok())
                .collect();
            stats = stats.with_boost(&boosts);
        }
        summaries.push(ExperimentSummary {
            backbone: backbone.clone(),
            variant,
            stats,
            mean_confusion: mean_confusion(&confusions)?,
        });
    }
    if !summaries.is_empty() {
        let files = emit_tables(&summaries, out)?;
        log::info!(
            "tables: {} / {}",
            files.performance.display(),
            files.confusion.display()
        );
    }
    log::info!("report written to {}", out.display());
    Ok(())
}

fn infer(
    checkpoint: &Path,
    frames_dir: &Path,
    grid: &GridArgs,
    threshold: f32,
    out: &Path,
) -> Result<()> {
    let model = ClassifierModel::load_checkpoint(checkpoint)?;
    let model_id = stem(checkpoint);
    std::fs::create_dir_all(out)?;
    let files = image_files(frames_dir)?;
    if files.is_empty() {
        bail!("no frames found in {}", frames_dir.display());
    }
    let mut all_detections: Vec<Detection> = Vec::new();
    for file in &files {
        let frame = decode_frame(file)?;
        let spec = grid.for_frame(frame.width(), frame.height())?;
        let frame_id = stem(file);
        let tiles = classify_frame(&frame, &model, &spec, threshold, &frame_id, &model_id)?;
        let (annotated, detections) = render_overlay(&frame, &tiles)?;
        let overlay_path = out.join(format!("{frame_id}_overlay.png"));
        annotated.save(&overlay_path)?;
        log::info!(
            "{}: {}/{} tiles positive -> {}",
            frame_id,
            tiles.positive_count(),
            tiles.cells.len(),
            overlay_path.display()
        );
        all_detections.extend(detections);
    }
    let det_path = out.join("detections.ndjson");
    write_detections(&all_detections, &det_path)?;
    log::info!(
        "{} detections across {} frames -> {}",
        all_detections.len(),
        files.len(),
        det_path.display()
    );
    Ok(())
}

fn validate(manifest_path: &Path, no_check_files: bool) -> Result<()> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let options = ValidateOptions {
        check_files: (!no_check_files).then(|| base.to_path_buf()),
    };
    let report = validate_manifest(&manifest, &options);
    let [train, val, test] = report.split_counts;
    println!("splits: train {train} / val {val} / test {test}");
    for (split, balance) in Split::ALL.iter().zip(report.balance) {
        match balance {
            Some(b) => println!("balance {split}: {b:.4} positive"),
            None => println!("balance {split}: n/a"),
        }
    }
    for finding in &report.findings {
        println!("{:?}: {}", finding.severity, finding.message);
    }
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        bail!("manifest failed validation with {} findings", report.findings.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_key_parsing() {
        assert_eq!(
            parse_run_key("VGG16_noaug_seed3"),
            Some(("VGG16".into(), "noaug".into(), 3))
        );
        assert_eq!(
            parse_run_key("tinycnn_aug_seed12_epoch10"),
            Some(("tinycnn".into(), "aug".into(), 12))
        );
        assert_eq!(parse_run_key("whatever"), None);
        assert_eq!(parse_run_key("x_unknowntag_seed1"), None);
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fractions("0.8,0.1,0.1").unwrap(), (0.8, 0.1, 0.1));
        assert!(parse_fractions("0.8,0.2").is_err());
        assert!(parse_fractions("a,b,c").is_err());
    }
}
