//! Result tables and training-curve figures built from persisted runs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::draw;
use crate::evaluation::{AggregateStats, MeanConfusion};
#[cfg(test)]
use crate::evaluation::MetricStat;
use crate::trainer::RunHistory;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no histories to aggregate")]
    EmptyHistories,
    #[error("history length mismatch: {0} vs {1} epochs")]
    LengthMismatch(usize, usize),
    #[error("histories disagree on the phase boundary: epoch {0} vs {1}")]
    BoundaryMismatch(usize, usize),
    #[error("duplicate experiment column '{0}'")]
    DuplicateColumn(String),
    #[error("no experiments to tabulate")]
    NoExperiments,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training-or-validation series tracked per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Series {
    TrainLoss,
    ValLoss,
    TrainAccuracy,
    ValAccuracy,
}

impl Series {
    pub const ALL: [Series; 4] = [
        Series::TrainLoss,
        Series::ValLoss,
        Series::TrainAccuracy,
        Series::ValAccuracy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Series::TrainLoss => "train_loss",
            Series::ValLoss => "val_loss",
            Series::TrainAccuracy => "train_acc",
            Series::ValAccuracy => "val_acc",
        }
    }

    fn extract(&self, record: &crate::trainer::EpochRecord) -> f64 {
        match self {
            Series::TrainLoss => record.train_loss,
            Series::ValLoss => record.val_loss,
            Series::TrainAccuracy => record.train_accuracy,
            Series::ValAccuracy => record.val_accuracy,
        }
    }
}

/// Pointwise band value across replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPoint {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-epoch mean and min/max envelope of each series across
/// replicates, plus the phase boundary for the figure marker.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveBand {
    pub finetune_start_epoch: usize,
    pub train_loss: Vec<BandPoint>,
    pub val_loss: Vec<BandPoint>,
    pub train_accuracy: Vec<BandPoint>,
    pub val_accuracy: Vec<BandPoint>,
}

impl CurveBand {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    pub fn series(&self, series: Series) -> &[BandPoint] {
        match series {
            Series::TrainLoss => &self.train_loss,
            Series::ValLoss => &self.val_loss,
            Series::TrainAccuracy => &self.train_accuracy,
            Series::ValAccuracy => &self.val_accuracy,
        }
    }
}

/// Pointwise mean/min/max across replicate histories for all four
/// series. Permutation-invariant over the replicate list.
pub fn build_curves(histories: &[&RunHistory]) -> Result<CurveBand, ReportError> {
    let first = histories.first().ok_or(ReportError::EmptyHistories)?;
    let epochs = first.records.len();
    let boundary = first.config.finetune_start_epoch;
    for h in histories {
        if h.records.len() != epochs {
            return Err(ReportError::LengthMismatch(epochs, h.records.len()));
        }
        if h.config.finetune_start_epoch != boundary {
            return Err(ReportError::BoundaryMismatch(
                boundary,
                h.config.finetune_start_epoch,
            ));
        }
    }
    let band_for = |series: Series| -> Vec<BandPoint> {
        (0..epochs)
            .map(|e| {
                let mut values: Vec<f64> =
                    histories.iter().map(|h| series.extract(&h.records[e])).collect();
                // Summing in sorted order makes the mean exactly
                // permutation-invariant over the replicate list.
                values.sort_by(f64::total_cmp);
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                BandPoint {
                    mean,
                    min: values[0],
                    max: values[values.len() - 1],
                }
            })
            .collect()
    };
    Ok(CurveBand {
        finetune_start_epoch: boundary,
        train_loss: band_for(Series::TrainLoss),
        val_loss: band_for(Series::ValLoss),
        train_accuracy: band_for(Series::TrainAccuracy),
        val_accuracy: band_for(Series::ValAccuracy),
    })
}

/// Write the long-format curve CSV: `epoch, metric, mean, min, max`.
pub fn write_curves_csv(band: &CurveBand, path: &Path) -> Result<(), ReportError> {
    let mut body = String::from("epoch,metric,mean,min,max\n");
    for series in Series::ALL {
        for (epoch, p) in band.series(series).iter().enumerate() {
            body.push_str(&format!(
                "{epoch},{},{},{},{}\n",
                series.as_str(),
                p.mean,
                p.min,
                p.max
            ));
        }
    }
    std::fs::write(path, body).map_err(io_err(path))
}

/// Augmentation variant of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    NonAug,
    Aug,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::NonAug => "Non-Aug",
            Variant::Aug => "Aug",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "Non-Aug" => Some(Variant::NonAug),
            "Aug" => Some(Variant::Aug),
            _ => None,
        }
    }

    /// File-name tag used by the trainer.
    pub fn from_tag(tag: &str) -> Option<Variant> {
        match tag {
            "noaug" => Some(Variant::NonAug),
            "aug" => Some(Variant::Aug),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One aggregated experiment, keyed by backbone and variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub backbone: String,
    pub variant: Variant,
    pub stats: AggregateStats,
    pub mean_confusion: MeanConfusion,
}

/// Files produced by [`emit_tables`].
#[derive(Debug, Clone)]
pub struct TableFiles {
    pub performance: PathBuf,
    pub performance_pretty: PathBuf,
    pub confusion: PathBuf,
    pub confusion_pretty: PathBuf,
}

const PERFORMANCE_ROWS: [&str; 8] = [
    "Precision",
    "Recall (Mean)",
    "Accuracy (Mean)",
    "Accuracy (SD)",
    "F1-Score (Mean)",
    "F1-Score (SD)",
    "Finetune Accuracy Boost",
    "Finetune Loss Reduction",
];

const CONFUSION_ROWS: [&str; 4] = [
    "True Positive",
    "False Positive",
    "True Negative",
    "False Negative",
];

fn registry_rank(backbone: &str) -> usize {
    crate::model::list_backbones()
        .iter()
        .position(|s| s.name == backbone)
        .unwrap_or(usize::MAX)
}

fn sorted_columns(experiments: &[ExperimentSummary]) -> Result<Vec<usize>, ReportError> {
    let mut seen = BTreeSet::new();
    for e in experiments {
        if !seen.insert((e.backbone.clone(), e.variant)) {
            return Err(ReportError::DuplicateColumn(format!(
                "{} {}",
                e.backbone, e.variant
            )));
        }
    }
    let mut order: Vec<usize> = (0..experiments.len()).collect();
    order.sort_by(|&a, &b| {
        let ea = &experiments[a];
        let eb = &experiments[b];
        (registry_rank(&ea.backbone), &ea.backbone, ea.variant).cmp(&(
            registry_rank(&eb.backbone),
            &eb.backbone,
            eb.variant,
        ))
    });
    Ok(order)
}

fn fmt_cell(value: Option<f64>, pretty: bool) -> String {
    match value {
        None => String::new(),
        Some(v) if pretty => format!("{v:.4}"),
        Some(v) => format!("{v}"),
    }
}

fn performance_cell(stats: &AggregateStats, row: usize) -> Option<f64> {
    match row {
        0 => stats.precision.as_ref().map(|p| p.mean),
        1 => Some(stats.recall.mean),
        2 => Some(stats.accuracy.mean),
        3 => Some(stats.accuracy.sd),
        4 => Some(stats.f1.mean),
        5 => Some(stats.f1.sd),
        6 => stats.boost.map(|b| b.0),
        7 => stats.boost.map(|b| b.1),
        _ => unreachable!(),
    }
}

fn write_table(
    path: &Path,
    rows: &[&str],
    columns: &[String],
    cell: impl Fn(usize, usize) -> Option<f64>,
    pretty: bool,
) -> Result<(), ReportError> {
    let mut body = String::from("metric");
    for c in columns {
        body.push(',');
        body.push_str(c);
    }
    body.push('\n');
    for (ri, row) in rows.iter().enumerate() {
        body.push_str(&format!("\"{row}\""));
        for ci in 0..columns.len() {
            body.push(',');
            body.push_str(&fmt_cell(cell(ri, ci), pretty));
        }
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}

/// Emit the performance and confusion tables, each in a full-precision
/// and a 4-decimal display variant. Columns are ordered by backbone
/// registry rank, Non-Aug before Aug.
pub fn emit_tables(
    experiments: &[ExperimentSummary],
    out_dir: &Path,
) -> Result<TableFiles, ReportError> {
    if experiments.is_empty() {
        return Err(ReportError::NoExperiments);
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let order = sorted_columns(experiments)?;
    let columns: Vec<String> = order
        .iter()
        .map(|&i| format!("{} {}", experiments[i].backbone, experiments[i].variant))
        .collect();

    let files = TableFiles {
        performance: out_dir.join("performance_metrics.csv"),
        performance_pretty: out_dir.join("performance_metrics_pretty.csv"),
        confusion: out_dir.join("confusion_metrics.csv"),
        confusion_pretty: out_dir.join("confusion_metrics_pretty.csv"),
    };

    for (path, pretty) in [(&files.performance, false), (&files.performance_pretty, true)] {
        write_table(
            path,
            &PERFORMANCE_ROWS,
            &columns,
            |ri, ci| performance_cell(&experiments[order[ci]].stats, ri),
            pretty,
        )?;
    }
    for (path, pretty) in [(&files.confusion, false), (&files.confusion_pretty, true)] {
        write_table(
            path,
            &CONFUSION_ROWS,
            &columns,
            |ri, ci| {
                let c = &experiments[order[ci]].mean_confusion;
                Some(match ri {
                    0 => c.true_positives,
                    1 => c.false_positives,
                    2 => c.true_negatives,
                    3 => c.false_negatives,
                    _ => unreachable!(),
                })
            },
            pretty,
        )?;
    }
    Ok(files)
}

/// One parsed column of the full-precision performance table.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceColumn {
    pub backbone: String,
    pub variant: Variant,
    pub cells: [Option<f64>; 8],
}

fn split_csv_row(line: &str) -> Vec<String> {
    // Cells never contain commas; row labels are quoted.
    line.split(',')
        .map(|s| s.trim_matches('"').to_string())
        .collect()
}

fn parse_column_key(path: &Path, name: &str) -> Result<(String, Variant), ReportError> {
    let (backbone, variant) = name.rsplit_once(' ').ok_or_else(|| ReportError::Parse {
        path: path.to_path_buf(),
        msg: format!("column '{name}' is not '<backbone> <variant>'"),
    })?;
    let variant = Variant::parse(variant).ok_or_else(|| ReportError::Parse {
        path: path.to_path_buf(),
        msg: format!("unknown variant in column '{name}'"),
    })?;
    Ok((backbone.to_string(), variant))
}

fn read_table(path: &Path, expect_rows: &[&str]) -> Result<Vec<(String, Variant, Vec<Option<f64>>)>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: String| ReportError::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    let header = split_csv_row(lines.next().ok_or_else(|| bad("empty table".into()))?);
    if header.first().map(String::as_str) != Some("metric") {
        return Err(bad("missing 'metric' header column".into()));
    }
    let mut columns: Vec<(String, Variant, Vec<Option<f64>>)> = header[1..]
        .iter()
        .map(|name| parse_column_key(path, name).map(|(b, v)| (b, v, Vec::new())))
        .collect::<Result<_, _>>()?;
    for (ri, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells = split_csv_row(line);
        if cells.len() != columns.len() + 1 {
            return Err(bad(format!("row {}: wrong cell count", ri + 2)));
        }
        if ri >= expect_rows.len() || cells[0] != expect_rows[ri] {
            return Err(bad(format!("row {}: unexpected label '{}'", ri + 2, cells[0])));
        }
        for (ci, cell) in cells[1..].iter().enumerate() {
            let value = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|e| bad(format!("{cell}: {e}")))?)
            };
            columns[ci].2.push(value);
        }
    }
    Ok(columns)
}

/// Parse back the full-precision performance table.
pub fn read_performance_table(path: &Path) -> Result<Vec<PerformanceColumn>, ReportError> {
    read_table(path, &PERFORMANCE_ROWS)?
        .into_iter()
        .map(|(backbone, variant, cells)| {
            let cells: [Option<f64>; 8] =
                cells.try_into().map_err(|_| ReportError::Parse {
                    path: path.to_path_buf(),
                    msg: "wrong row count".into(),
                })?;
            Ok(PerformanceColumn {
                backbone,
                variant,
                cells,
            })
        })
        .collect()
}

/// Parse back the full-precision confusion table.
pub fn read_confusion_table(
    path: &Path,
) -> Result<Vec<(String, Variant, MeanConfusion)>, ReportError> {
    read_table(path, &CONFUSION_ROWS)?
        .into_iter()
        .map(|(backbone, variant, cells)| {
            let take = |i: usize| {
                cells[i].ok_or_else(|| ReportError::Parse {
                    path: path.to_path_buf(),
                    msg: format!("empty confusion cell row {i}"),
                })
            };
            Ok((
                backbone,
                variant,
                MeanConfusion {
                    true_positives: take(0)?,
                    false_positives: take(1)?,
                    true_negatives: take(2)?,
                    false_negatives: take(3)?,
                },
            ))
        })
        .collect()
}

/// The 8 performance-table values of one experiment, in row order.
pub fn performance_cells(stats: &AggregateStats) -> [Option<f64>; 8] {
    [
        performance_cell(stats, 0),
        performance_cell(stats, 1),
        performance_cell(stats, 2),
        performance_cell(stats, 3),
        performance_cell(stats, 4),
        performance_cell(stats, 5),
        performance_cell(stats, 6),
        performance_cell(stats, 7),
    ]
}

/// Axis extents of the rendered figures, for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureMeta {
    pub x_range: (f64, f64),
    pub accuracy_y_range: (f64, f64),
    pub loss_y_range: (f64, f64),
}

/// Figures produced by [`render_plots`].
#[derive(Debug, Clone)]
pub struct PlotFiles {
    pub accuracy: PathBuf,
    pub loss: PathBuf,
    pub meta: FigureMeta,
}

const PLOT_W: u32 = 960;
const PLOT_H: u32 = 640;
const MARGIN_LEFT: i64 = 78;
const MARGIN_RIGHT: i64 = 24;
const MARGIN_TOP: i64 = 28;
const MARGIN_BOTTOM: i64 = 56;

const TRAIN_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
const VAL_COLOR: Rgb<u8> = Rgb([255, 127, 14]);

struct PlotFrame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl PlotFrame {
    fn px(&self, x: f64) -> i64 {
        let w = (PLOT_W as i64 - MARGIN_LEFT - MARGIN_RIGHT) as f64;
        MARGIN_LEFT + ((x - self.x0) / (self.x1 - self.x0) * w).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let h = (PLOT_H as i64 - MARGIN_TOP - MARGIN_BOTTOM) as f64;
        MARGIN_TOP + ((1.0 - (y - self.y0) / (self.y1 - self.y0)) * h).round() as i64
    }
}

fn series_extent(bands: &[&[BandPoint]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for band in bands {
        for p in *band {
            lo = lo.min(p.min);
            hi = hi.max(p.max);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn draw_band(img: &mut RgbImage, frame: &PlotFrame, band: &[BandPoint], color: Rgb<u8>) {
    if band.len() < 2 {
        return;
    }
    let last = band.len() - 1;
    let px_start = frame.px(0.0);
    let px_end = frame.px(last as f64);
    for px in px_start..=px_end {
        let t = (px - px_start) as f64 / (px_end - px_start).max(1) as f64 * last as f64;
        let e0 = (t.floor() as usize).min(last - 1);
        let f = t - e0 as f64;
        let lo = band[e0].min + f * (band[e0 + 1].min - band[e0].min);
        let hi = band[e0].max + f * (band[e0 + 1].max - band[e0].max);
        let (top, bottom) = (frame.py(hi), frame.py(lo));
        for py in top..=bottom {
            draw::blend(img, px, py, color, 0.22);
        }
    }
}

fn draw_mean(img: &mut RgbImage, frame: &PlotFrame, band: &[BandPoint], color: Rgb<u8>) {
    for (i, pair) in band.windows(2).enumerate() {
        let a = (frame.px(i as f64), frame.py(pair[0].mean));
        let b = (frame.px((i + 1) as f64), frame.py(pair[1].mean));
        draw::line(img, a, b, color);
        draw::line(img, (a.0, a.1 + 1), (b.0, b.1 + 1), color);
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1000.0) {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn render_figure(
    band: &CurveBand,
    train: &[BandPoint],
    val: &[BandPoint],
    y_label: &str,
    y_range: (f64, f64),
    x_range: (f64, f64),
    path: &Path,
) -> Result<(), ReportError> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let frame = PlotFrame {
        x0: x_range.0,
        x1: x_range.1,
        y0: y_range.0,
        y1: y_range.1,
    };
    let (left, right) = (MARGIN_LEFT, PLOT_W as i64 - MARGIN_RIGHT);
    let (top, bottom) = (MARGIN_TOP, PLOT_H as i64 - MARGIN_BOTTOM);
    let black = Rgb([20, 20, 20]);
    let gray = Rgb([150, 150, 150]);

    draw_band(&mut img, &frame, train, TRAIN_COLOR);
    draw_band(&mut img, &frame, val, VAL_COLOR);
    draw_mean(&mut img, &frame, train, TRAIN_COLOR);
    draw_mean(&mut img, &frame, val, VAL_COLOR);

    // Phase-boundary marker.
    if band.finetune_start_epoch > 0 && (band.finetune_start_epoch as f64) < frame.x1 {
        let px = frame.px(band.finetune_start_epoch as f64);
        draw::dashed_vline(&mut img, px, top, bottom, gray);
    }

    // Axes.
    draw::line(&mut img, (left, top), (left, bottom), black);
    draw::line(&mut img, (left, bottom), (right, bottom), black);

    // Ticks and labels.
    for i in 0..=4 {
        let x = frame.x0 + (frame.x1 - frame.x0) * i as f64 / 4.0;
        let px = frame.px(x);
        draw::line(&mut img, (px, bottom), (px, bottom + 5), black);
        let label = format_tick(x);
        let w = draw::text_width(&label, 1) as i64;
        draw::text(&mut img, px - w / 2, bottom + 9, &label, 1, black);

        let y = frame.y0 + (frame.y1 - frame.y0) * i as f64 / 4.0;
        let py = frame.py(y);
        draw::line(&mut img, (left - 5, py), (left, py), black);
        let label = format_tick(y);
        let w = draw::text_width(&label, 1) as i64;
        draw::text(&mut img, left - 8 - w, py - 3, &label, 1, black);
    }
    let x_title = "EPOCH";
    let xw = draw::text_width(x_title, 1) as i64;
    draw::text(
        &mut img,
        (left + right) / 2 - xw / 2,
        bottom + 24,
        x_title,
        1,
        black,
    );
    draw::text(&mut img, 6, top, y_label, 1, black);

    // Legend, top-right inside the plot.
    let legend_x = right - 110;
    draw::line(&mut img, (legend_x, top + 10), (legend_x + 18, top + 10), TRAIN_COLOR);
    draw::text(&mut img, legend_x + 24, top + 6, "TRAIN", 1, black);
    draw::line(&mut img, (legend_x, top + 24), (legend_x + 18, top + 24), VAL_COLOR);
    draw::text(&mut img, legend_x + 24, top + 20, "VAL", 1, black);

    img.save(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Render the accuracy and loss figures for one experiment: mean lines
/// with shaded min/max envelopes for train and validation, plus a
/// dashed marker at the fine-tune start epoch. Output bytes are
/// deterministic for a fixed band.
pub fn render_plots(band: &CurveBand, out_dir: &Path) -> Result<PlotFiles, ReportError> {
    if band.is_empty() {
        return Err(ReportError::EmptyHistories);
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let x_range = (0.0, band.len() as f64);
    let accuracy_y_range = series_extent(&[&band.train_accuracy, &band.val_accuracy]);
    let loss_y_range = series_extent(&[&band.train_loss, &band.val_loss]);
    let files = PlotFiles {
        accuracy: out_dir.join("accuracy.png"),
        loss: out_dir.join("loss.png"),
        meta: FigureMeta {
            x_range,
            accuracy_y_range,
            loss_y_range,
        },
    };
    render_figure(
        band,
        &band.train_accuracy,
        &band.val_accuracy,
        "ACCURACY",
        accuracy_y_range,
        x_range,
        &files.accuracy,
    )?;
    render_figure(
        band,
        &band.train_loss,
        &band.val_loss,
        "LOSS",
        loss_y_range,
        x_range,
        &files.loss,
    )?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{EpochRecord, Phase, TrainConfig};

    pub(crate) fn synthetic_history(
        seed: u64,
        epochs: usize,
        finetune_start: usize,
    ) -> RunHistory {
        let offset = seed as f64 * 0.01;
        let records = (0..epochs)
            .map(|epoch| {
                let progress = epoch as f64 / epochs.max(1) as f64;
                EpochRecord {
                    epoch,
                    phase: if epoch < finetune_start {
                        Phase::HeadOnly
                    } else {
                        Phase::FineTune
                    },
                    train_loss: (1.0 - progress) * 0.9 + offset,
                    train_accuracy: 0.5 + progress * 0.45 - offset,
                    val_loss: (1.0 - progress) * 1.0 + offset,
                    val_accuracy: 0.5 + progress * 0.4 - offset,
                    trainable_parameter_count: if epoch < finetune_start { 33 } else { 4673 },
                    learning_rate: if epoch < finetune_start { 1e-3 } else { 1e-5 },
                }
            })
            .collect();
        RunHistory {
            records,
            config: TrainConfig {
                total_epochs: epochs,
                finetune_start_epoch: finetune_start,
                ..TrainConfig::default()
            },
            seed,
            final_checkpoint: None,
        }
    }

    #[test]
    fn single_history_band_collapses_to_itself() {
        let h = synthetic_history(0, 10, 6);
        let band = build_curves(&[&h]).unwrap();
        assert_eq!(band.len(), 10);
        for (i, p) in band.val_accuracy.iter().enumerate() {
            assert_eq!(p.mean, h.records[i].val_accuracy);
            assert_eq!(p.min, p.mean);
            assert_eq!(p.max, p.mean);
        }
    }

    #[test]
    fn band_matches_hand_computation_and_is_permutation_invariant() {
        let hs: Vec<RunHistory> = (0..5).map(|s| synthetic_history(s, 8, 4)).collect();
        let refs: Vec<&RunHistory> = hs.iter().collect();
        let band = build_curves(&refs).unwrap();
        // Hand computation at epoch 3 for val_loss: values are
        // (1 - 3/8) + s * 0.01 for s in 0..5.
        let base = 1.0 - 3.0 / 8.0;
        let expect_mean = base + 0.02;
        assert!((band.val_loss[3].mean - expect_mean).abs() < 1e-12);
        assert!((band.val_loss[3].min - base).abs() < 1e-12);
        assert!((band.val_loss[3].max - (base + 0.04)).abs() < 1e-12);

        let mut reversed: Vec<&RunHistory> = hs.iter().collect();
        reversed.reverse();
        assert_eq!(build_curves(&reversed).unwrap(), band);
        // min <= mean <= max everywhere.
        for series in Series::ALL {
            for p in band.series(series) {
                assert!(p.min <= p.mean && p.mean <= p.max);
            }
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let a = synthetic_history(0, 8, 4);
        let b = synthetic_history(1, 9, 4);
        assert!(matches!(
            build_curves(&[&a, &b]),
            Err(ReportError::LengthMismatch(8, 9))
        ));
    }

    fn sample_summary(backbone: &str, variant: Variant, bias: f64) -> ExperimentSummary {
        ExperimentSummary {
            backbone: backbone.to_string(),
            variant,
            stats: AggregateStats {
                precision: Some(MetricStat {
                    mean: 0.99 - bias,
                    sd: 0.001,
                }),
                recall: MetricStat {
                    mean: 0.97 - bias,
                    sd: 0.002,
                },
                accuracy: MetricStat {
                    mean: 0.98 - bias,
                    sd: 0.0015,
                },
                f1: MetricStat {
                    mean: 0.979 - bias,
                    sd: 0.0016,
                },
                boost: Some((0.04 + bias, 0.09 + bias)),
                single_run: false,
            },
            mean_confusion: MeanConfusion {
                true_positives: 684.2,
                false_positives: 5.4,
                true_negatives: 694.8,
                false_negatives: 15.6,
            },
        }
    }

    #[test]
    fn tables_roundtrip_at_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let experiments = vec![
            sample_summary("VGG16", Variant::NonAug, 0.0),
            sample_summary("VGG16", Variant::Aug, 0.013),
            sample_summary("ResNet50", Variant::NonAug, 0.007),
        ];
        let files = emit_tables(&experiments, dir.path()).unwrap();
        let parsed = read_performance_table(&files.performance).unwrap();
        assert_eq!(parsed.len(), 3);
        // Registry order: ResNet50 before VGG16; Non-Aug before Aug.
        assert_eq!(parsed[0].backbone, "ResNet50");
        assert_eq!(parsed[1].variant, Variant::NonAug);
        assert_eq!(parsed[2].variant, Variant::Aug);
        for col in &parsed {
            let source = experiments
                .iter()
                .find(|e| e.backbone == col.backbone && e.variant == col.variant)
                .unwrap();
            assert_eq!(col.cells, performance_cells(&source.stats));
        }
        let confusion = read_confusion_table(&files.confusion).unwrap();
        assert_eq!(confusion.len(), 3);
        for (backbone, variant, mc) in &confusion {
            let source = experiments
                .iter()
                .find(|e| &e.backbone == backbone && e.variant == *variant)
                .unwrap();
            assert_eq!(*mc, source.mean_confusion);
        }
    }

    #[test]
    fn single_experiment_makes_an_eight_by_one_table() {
        let dir = tempfile::tempdir().unwrap();
        let files =
            emit_tables(&[sample_summary("Xception", Variant::Aug, 0.0)], dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.performance).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 9); // header + 8 metric rows
        assert!(lines[0].ends_with("Xception Aug"));
        for line in &lines[1..] {
            assert_eq!(line.matches(',').count(), 1);
        }
    }

    #[test]
    fn duplicate_columns_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let twice = vec![
            sample_summary("VGG16", Variant::Aug, 0.0),
            sample_summary("VGG16", Variant::Aug, 0.01),
        ];
        assert!(matches!(
            emit_tables(&twice, dir.path()),
            Err(ReportError::DuplicateColumn(_))
        ));
    }

    #[test]
    fn undefined_cells_survive_roundtrip_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let mut summary = sample_summary("EfficientNetB7", Variant::NonAug, 0.0);
        summary.stats.precision = None;
        summary.stats.boost = None;
        let files = emit_tables(&[summary], dir.path()).unwrap();
        let parsed = read_performance_table(&files.performance).unwrap();
        assert_eq!(parsed[0].cells[0], None);
        assert_eq!(parsed[0].cells[6], None);
        assert_eq!(parsed[0].cells[7], None);
    }

    #[test]
    fn plots_are_written_with_covering_axes() {
        let dir = tempfile::tempdir().unwrap();
        let hs: Vec<RunHistory> = (0..5).map(|s| synthetic_history(s, 12, 8)).collect();
        let refs: Vec<&RunHistory> = hs.iter().collect();
        let band = build_curves(&refs).unwrap();
        let files = render_plots(&band, dir.path()).unwrap();
        for path in [&files.accuracy, &files.loss] {
            let meta = std::fs::metadata(path).unwrap();
            assert!(meta.len() > 0, "figure {path:?} is empty");
        }
        // Axis ranges cover [0, total_epochs] x data range.
        assert_eq!(files.meta.x_range.0, 0.0);
        assert!(files.meta.x_range.1 >= 12.0);
        let (lo, hi) = files.meta.accuracy_y_range;
        for p in band.train_accuracy.iter().chain(&band.val_accuracy) {
            assert!(p.min >= lo && p.max <= hi);
        }
        // Determinism: rendering twice yields identical bytes.
        let again_dir = tempfile::tempdir().unwrap();
        let again = render_plots(&band, again_dir.path()).unwrap();
        assert_eq!(
            std::fs::read(&files.accuracy).unwrap(),
            std::fs::read(&again.accuracy).unwrap()
        );
    }

    #[test]
    fn degenerate_band_renders() {
        let h = synthetic_history(0, 6, 3);
        let band = build_curves(&[&h]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // min == max everywhere: zero-height band must still render.
        let files = render_plots(&band, dir.path()).unwrap();
        assert!(files.accuracy.exists() && files.loss.exists());
    }

    #[test]
    fn curves_csv_has_expected_shape() {
        let h = synthetic_history(0, 6, 3);
        let band = build_curves(&[&h]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_curves_csv(&band, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,metric,mean,min,max");
        assert_eq!(lines.len(), 1 + 4 * 6);
    }
}
