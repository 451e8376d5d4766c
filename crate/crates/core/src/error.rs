//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside an op's mathematical domain (log of non-positive, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally valid input that degenerates numerically (near-zero row
    /// norm, batch too small for batch statistics, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values or failed numerical routines.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Linear system with fewer samples than unknowns.
    #[error("underdetermined system: {0}")]
    Underdetermined(String),

    /// A training trial aborted (NaN loss, non-finite gradient).
    #[error("trial aborted at step {step}: {reason}")]
    TrialAborted { step: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
