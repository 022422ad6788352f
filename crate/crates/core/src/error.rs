use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("index out of bounds: coordinate {coord} on mode {mode} exceeds size {dim}")]
    Bounds { mode: usize, coord: usize, dim: usize },

    #[error("duplicate entry at index {0:?}")]
    DuplicateEntry(Vec<usize>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("entity {0} has no group label")]
    MissingLabel(usize),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("entity {0} has a zero-norm factor row; cosine similarity is undefined")]
    ZeroNormRow(usize),

    #[error("group {0} has no entries")]
    EmptyGroup(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
