use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid shape {width}x{height}x{channels}: {reason}")]
    InvalidShape {
        width: usize,
        height: usize,
        channels: usize,
        reason: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("degenerate plane: target camera centre lies on the plane (|a| = {distance:e})")]
    DegeneratePlane { distance: f64 },

    #[error("singular homography (normalized |det| = {det:e})")]
    SingularHomography { det: f64 },

    #[error("invalid mpi: {0}")]
    InvalidMpi(String),

    #[error("empty point set")]
    EmptyPointSet,

    #[error("non-positive disparity {value:e} sampled at point {index} ({x}, {y})")]
    NonPositiveDisparity {
        index: usize,
        x: f64,
        y: f64,
        value: f64,
    },

    #[error("invalid point {index}: {reason}")]
    InvalidPoint { index: usize, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("image too small for {context}: {width}x{height} (minimum {min})")]
    TooSmall {
        context: &'static str,
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("empty mask: no pixel exceeds threshold {threshold}")]
    EmptyMask { threshold: f64 },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unsupported archive version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("corrupt layer {index}: {reason}")]
    CorruptLayer { index: usize, reason: String },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier, used for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape { .. } => "invalid-shape",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::InvalidRange(_) => "invalid-range",
            Error::InvalidCamera(_) => "invalid-camera",
            Error::DegeneratePlane { .. } => "degenerate-plane",
            Error::SingularHomography { .. } => "singular-homography",
            Error::InvalidMpi(_) => "invariant-violation",
            Error::EmptyPointSet => "empty-point-set",
            Error::NonPositiveDisparity { .. } => "non-positive-disparity",
            Error::InvalidPoint { .. } => "invalid-point",
            Error::NonFinite(_) => "non-finite",
            Error::InvalidConfig(_) => "invalid-config",
            Error::EmptyResult(_) => "empty-result",
            Error::TooSmall { .. } => "too-small",
            Error::EmptyMask { .. } => "empty-mask",
            Error::Parse { .. } => "parse",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::CorruptLayer { .. } => "corrupt-layer",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
