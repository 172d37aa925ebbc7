use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {message}")]
    InvalidParam { field: &'static str, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("degenerate patch dimensions {width}x{height}: normalized radius is zero")]
    DegeneratePatchDims { width: usize, height: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to encode/decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown config key `{key}` in {path}")]
    UnknownConfigKey { key: String, path: PathBuf },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("detector failed the clean AP floor {floor}: {detail}")]
    ApFloor { floor: f64, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dataset split produced an empty {0} split")]
    EmptySplit(&'static str),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error stems from user-supplied input (config, paths,
    /// malformed files) rather than an internal invariant failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParam { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Parse { .. }
                | Error::UnknownConfigKey { .. }
                | Error::Checkpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::EmptyInput(_)
                | Error::Invalid(_)
        )
    }
}
