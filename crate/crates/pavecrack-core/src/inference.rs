//! Full-frame survey inference: tile, classify per cell, annotate.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{extract_patches, DatasetError, GridSpec, Label};
use crate::draw;
use crate::evaluation::classify_probabilities;
use crate::model::{ClassifierModel, ModelError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("tile grid ({rows}x{cols}) does not match frame {width}x{height}")]
    GridMismatch {
        rows: u32,
        cols: u32,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Classification of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileCell {
    pub probability: f32,
    pub label: Label,
}

/// Per-cell crack decisions for one frame.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub grid: GridSpec,
    /// Row-major, `rows * cols` cells.
    pub cells: Vec<TileCell>,
    pub frame_id: String,
    /// Checkpoint reference of the classifying model.
    pub model_id: String,
    pub threshold: f32,
}

impl TileGrid {
    pub fn cell(&self, row: u32, col: u32) -> &TileCell {
        &self.cells[(row * self.grid.cols + col) as usize]
    }

    pub fn positive_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.label == Label::Positive)
            .count()
    }
}

/// Tile a frame and classify every cell independently.
///
/// Cell `(r, c)` carries exactly the probability the model assigns to
/// the extracted patch at `(r, c)`; no cross-tile smoothing.
pub fn classify_frame(
    frame: &RgbImage,
    model: &ClassifierModel,
    grid: &GridSpec,
    threshold: f32,
    frame_id: &str,
    model_id: &str,
) -> Result<TileGrid, InferError> {
    let patches = extract_patches(frame, grid, frame_id)?;
    let rasters: Vec<&RgbImage> = patches.iter().map(|p| &p.pixels).collect();
    let probabilities = model.predict_patches(&rasters)?;
    let labels = classify_probabilities(&probabilities, threshold);
    let cells = probabilities
        .into_iter()
        .zip(labels)
        .map(|(probability, label)| TileCell { probability, label })
        .collect();
    Ok(TileGrid {
        grid: *grid,
        cells,
        frame_id: frame_id.to_string(),
        model_id: model_id.to_string(),
        threshold,
    })
}

/// One positive tile in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: String,
    pub row: u32,
    pub col: u32,
    /// Top-left frame coordinates of the tile.
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub probability: f32,
    pub label: String,
}

const OUTLINE: Rgb<u8> = Rgb([220, 30, 30]);

/// Draw the positive tiles onto a copy of the frame and list them.
///
/// Only pixels inside positive tile rectangles are touched; an
/// all-negative grid returns a pixel-identical copy. The detection
/// record has one entry per positive cell.
pub fn render_overlay(
    frame: &RgbImage,
    tiles: &TileGrid,
) -> Result<(RgbImage, Vec<Detection>), InferError> {
    if tiles.grid.validate_for(frame.width(), frame.height()).is_err()
        || tiles.cells.len() != tiles.grid.patch_count()
    {
        return Err(InferError::GridMismatch {
            rows: tiles.grid.rows,
            cols: tiles.grid.cols,
            width: frame.width(),
            height: frame.height(),
        });
    }
    let mut annotated = frame.clone();
    let mut detections = Vec::new();
    let size = tiles.grid.patch_size;
    for row in 0..tiles.grid.rows {
        for col in 0..tiles.grid.cols {
            let cell = tiles.cell(row, col);
            if cell.label != Label::Positive {
                continue;
            }
            let (x, y) = tiles.grid.patch_origin(row, col);
            draw::rect_outline(&mut annotated, x as i64, y as i64, size, size, 3, OUTLINE);
            let text = format!("{:.2}", cell.probability);
            let scale = if size >= 96 { 2 } else { 1 };
            if size >= 32 {
                draw::text(
                    &mut annotated,
                    x as i64 + 6,
                    y as i64 + 6,
                    &text,
                    scale,
                    OUTLINE,
                );
            }
            detections.push(Detection {
                frame_id: tiles.frame_id.clone(),
                row,
                col,
                x,
                y,
                size,
                probability: cell.probability,
                label: Label::Positive.as_str().to_string(),
            });
        }
    }
    Ok((annotated, detections))
}

/// Append detections as newline-delimited JSON objects.
pub fn write_detections(detections: &[Detection], path: &Path) -> Result<(), InferError> {
    let mut body = String::new();
    for d in detections {
        body.push_str(&serde_json::to_string(d).expect("detection serializes"));
        body.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| InferError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(body.as_bytes()).map_err(|e| InferError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a detections file written by [`write_detections`].
pub fn read_detections(path: &Path) -> Result<Vec<Detection>, InferError> {
    let text = std::fs::read_to_string(path).map_err(|e| InferError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let d: Detection = serde_json::from_str(line).map_err(|e| InferError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        out.push(d);
    }
    Ok(out)
}
