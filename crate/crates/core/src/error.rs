use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("range error at row {row}: {message}")]
    Range { row: usize, message: String },

    #[error("length error: expected {expected} rows, found {found}")]
    Length { expected: usize, found: usize },

    #[error("duplicate {kind} `{id}`")]
    Duplicate { kind: &'static str, id: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("lookup error: unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("normalization statistics mismatch: {0}")]
    StatsMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
