use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix shapes; the message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// An argument outside its documented range.
    #[error("invalid argument: {0}")]
    Arg(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// A required column or field is missing.
    #[error("schema error: {0}")]
    Schema(String),
    /// A row of an input file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Train {
        epoch: usize,
        batch: usize,
        msg: String,
    },
    /// An API contract was violated (e.g. backward from a non-scalar node).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
