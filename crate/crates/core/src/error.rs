use thiserror::Error;

/// Errors produced by the embedding library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("problem too large for exhaustive oracle: n = {n} (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty set")]
    EmptySet,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: String, position: usize },

    #[error("sequence {index} has length {len}, shorter than k-mer size {kmer}")]
    SequenceTooShort { index: usize, len: usize, kmer: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: feature width {found} differs from {expected}")]
    InconsistentDimension { line: usize, expected: usize, found: usize },

    #[error("line {line}: sample has no features")]
    EmptySample { line: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
