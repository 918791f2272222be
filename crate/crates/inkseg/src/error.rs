//! Unified error type for the whole crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input document (XML, JSON line) with source position.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Structurally valid input violating the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Data that parses but breaks a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor shape mismatch, names the offending op.
    #[error("dimension error in {op}: {message}")]
    Dimension { op: &'static str, message: String },

    /// Out-of-range scalar argument (dropout p, odd PE dim, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// API misuse (wrong feature mode, non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input exceeds a configured model capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Semantically invalid input to an operation.
    #[error("input error: {0}")]
    Input(String),

    /// Impossible configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A likelihood scorer returned an unusable value.
    #[error("scorer error: {0}")]
    Scorer(String),

    /// Training diverged; the message names the last good checkpoint if any.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
