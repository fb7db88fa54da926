//! Patch dataset construction: tiling, balanced splits, manifests.

mod grid;
mod manifest;

pub use grid::{
    decode_frame, extract_patches, GridSpec, DEFAULT_PATCH_SIZE, SURVEY_FRAME_HEIGHT,
    SURVEY_FRAME_WIDTH,
};
pub use manifest::{
    build_manifest, load_split, validate_manifest, BuildOptions, DatasetManifest, Finding,
    FindingKind, ManifestEntry, SampleRef, Severity, SplitLoader, ValidateOptions,
    ValidationReport, MANIFEST_HEADER,
};

use image::RgbImage;
use std::path::PathBuf;
use thiserror::Error;

/// Transform tag carried by unaugmented samples.
pub const IDENTITY_TAG: &str = "identity";

/// Binary crack label: positive means a crack is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "pos" => Some(Label::Positive),
            "neg" => Some(Label::Negative),
            _ => None,
        }
    }

    /// 1.0 for positive, 0.0 for negative.
    pub fn target(&self) -> f32 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataset partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One square patch cut from a survey frame, possibly transformed.
#[derive(Debug, Clone)]
pub struct PatchSample {
    /// 8-bit RGB raster, `patch_size` square.
    pub pixels: RgbImage,
    /// `None` until a human label is attached.
    pub label: Option<Label>,
    pub source_frame_id: String,
    pub grid_row: u32,
    pub grid_col: u32,
    /// Augmentation descriptor; [`IDENTITY_TAG`] for originals.
    pub transform_tag: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("grid exceeds frame along {axis}: needs {required} pixels, frame has {available}")]
    GridOutOfBounds {
        axis: char,
        required: u32,
        available: u32,
    },
    #[error("grid has zero rows, cols or patch size")]
    EmptyGrid,
    #[error("frame is not 8-bit 3-channel RGB (found {found:?})")]
    FrameFormat { found: image::ColorType },
    #[error("split fractions must be non-negative and sum to 1, got ({0}, {1}, {2})")]
    BadFractions(f64, f64, f64),
    #[error("requested total size {0} is not even; balanced splits need equal class counts")]
    OddTotal(usize),
    #[error("not enough {class} samples: need {needed}, have {available}")]
    Capacity {
        class: Label,
        needed: usize,
        available: usize,
    },
    #[error("manifest {path}: line {line}: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown split '{0}'")]
    UnknownSplit(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }
}
