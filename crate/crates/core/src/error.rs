use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}: expected \"GHEM\"")]
    BadMagic(PathBuf),
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("non-finite embedding entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("embedding row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("vocabulary has {vocab} entries but the matrix has {rows} rows")]
    LengthMismatch { vocab: usize, rows: usize },
    #[error("duplicate surface {0:?} in vocabulary")]
    DuplicateSurface(String),
    #[error("malformed {what} at line {line}: {detail}")]
    Parse {
        what: &'static str,
        line: usize,
        detail: String,
    },
    #[error("input is empty after normalization")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("overlap threshold must lie in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {0} has no shadow-map entry")]
    MissingEntry(usize),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("snapshot has no {0:?} segment")]
    MissingSegment(String),
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
    #[error("degenerate regressor: local_eps has zero variance")]
    DegenerateRegressor,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
