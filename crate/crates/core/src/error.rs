use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("thresholded image has no foreground pixels")]
    NoForeground,
    #[error("external segmenter requested but none is configured")]
    BackendUnavailable,
    #[error("external segmenter failed: {0}")]
    SegmenterFailed(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("roi {roi:?} exceeds image bounds {height}x{width}")]
    RoiOutOfBounds {
        roi: (usize, usize, usize, usize),
        height: usize,
        width: usize,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("exam has no views")]
    NoViews,
    #[error("augmentation requires a square plane, got {0}x{1}")]
    NonSquareInput(usize, usize),
    #[error("feature map {h}x{w} is not divisible by window {window}")]
    IndivisibleShape { h: usize, w: usize, window: usize },
    #[error("shift {shift} is invalid for window {window}")]
    BadShift { shift: usize, window: usize },
    #[error("patch merging needs even spatial dims, got {0}x{1}")]
    OddShape(usize, usize),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label smoothing epsilon {0} outside [0, 0.5)")]
    BadEpsilon(f64),
    #[error("missing rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("AUC needs at least one positive and one negative record")]
    SingleClass,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
