use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("invalid clip: {0}")]
    InvalidClip(String),

    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error("invalid warp: {0}")]
    InvalidWarp(String),

    #[error("coordinate ({x}, {y}) outside {width}x{height} frame")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("variant mismatch: {0}")]
    Variant(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{0}")]
    Metric(String),

    #[error("correspondence provider: {0}")]
    Provider(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
