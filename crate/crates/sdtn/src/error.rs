//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor algebra, optimization, data handling, and I/O.
#[derive(Error, Debug)]
pub enum SdtnError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("optimization diverged at iteration {iter}: loss is not finite")]
    Divergence { iter: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SdtnError>;
