//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input values outside their documented domain (range, emptiness, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two grids that must agree spatially do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// Patch dimensions must be divisible by the pooling factor of the network.
    #[error("{dim} = {size} is not divisible by {factor} (network depth requires it)")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        factor: usize,
    },

    /// A non-finite value appeared where only finite ones are meaningful.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A non-finite activation or loss was produced while training.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed pgm file {path}: {detail}")]
    Pgm { path: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

impl Error {
    pub fn shape_mismatch(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
