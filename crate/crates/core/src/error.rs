//! Error type shared across the crate.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped
//! by failure class so callers (in particular the CLI) can map them onto
//! exit codes without string matching.

use std::path::Path;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FloweError>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum FloweError {
    /// Shapes or sizes of inputs do not line up.
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension {
        context: &'static str,
        detail: String,
    },

    /// An affine map with |det| below the degeneracy threshold.
    #[error("degenerate affine map: |det| = {det:.3e} is below 1e-12")]
    DegenerateAffine { det: f64 },

    /// A configuration value (or combination) is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed flow file. `offset` is the byte position of the problem.
    #[error("flow file format error at byte {offset}: {what}")]
    FloFormat { offset: usize, what: String },

    /// Checkpoint does not start with the expected magic bytes.
    #[error("checkpoint magic mismatch: not a checkpoint file")]
    CheckpointBadMagic,

    /// Checkpoint version is not supported by this build.
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint was written for a different architecture.
    #[error("checkpoint architecture hash does not match the configured architecture")]
    CheckpointArchHash,

    /// Checkpoint was written at a different numeric precision.
    #[error("checkpoint precision {found}-bit does not match run precision {expected}-bit")]
    CheckpointPrecision { found: u8, expected: u8 },

    /// Checkpoint ends before the declared payload.
    #[error("checkpoint truncated at byte {offset}")]
    CheckpointTruncated { offset: usize },

    /// Structurally invalid checkpoint (bad counts, trailing bytes, ...).
    #[error("checkpoint format error: {what}")]
    CheckpointFormat { what: String },

    /// Bad input data (labels out of range, non-finite values, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A gradient became non-finite during training.
    #[error("non-finite gradient in {context} at step {step}")]
    NonFiniteGradient { context: String, step: u64 },

    /// I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Image decode/encode failure.
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl FloweError {
    /// Wrap an I/O error with the path it concerns.
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        FloweError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wrap an image error with the path it concerns.
    pub fn image(path: impl AsRef<Path>, source: image::ImageError) -> Self {
        FloweError::Image {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Shorthand for dimension errors.
    pub fn dim(context: &'static str, detail: impl Into<String>) -> Self {
        FloweError::Dimension {
            context,
            detail: detail.into(),
        }
    }

    /// True for errors caused by invalid configuration rather than runtime
    /// failure; the CLI maps these to a dedicated exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, FloweError::Config(_))
    }
}
