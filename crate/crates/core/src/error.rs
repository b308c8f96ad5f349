use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at {stage} {index}: {msg}")]
    NonFinite {
        stage: &'static str,
        index: usize,
        msg: String,
    },

    #[error("problem too large for exhaustive search: {edges} edges (cap {cap})")]
    SizeCap { edges: usize, cap: usize },

    #[error("ground-truth identities required but missing")]
    MissingGroundTruth,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerics or I/O.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Length { .. }
                | Error::Validation(_)
                | Error::Dimension(_)
                | Error::SizeCap { .. }
                | Error::MissingGroundTruth
                | Error::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
