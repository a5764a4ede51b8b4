use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: not a TSF1 store file")]
    BadMagic,

    #[error("unsupported store version {0}")]
    BadVersion(u32),

    #[error("truncated store file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("count mismatch: store header has {header} rows, metadata has {metadata} records")]
    CountMismatch { header: u64, metadata: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} (item {item_id}) has L2 norm {norm}, expected 1 within {tol}")]
    NormViolation {
        row: usize,
        item_id: u64,
        norm: f64,
        tol: f64,
    },

    #[error("item {item_id} has a zero-norm row")]
    ZeroNorm { item_id: u64 },

    #[error("invalid metadata at line {line}: {msg}")]
    Metadata { line: usize, msg: String },

    #[error("k = {k} out of range: {available} candidates available")]
    KOutOfRange { k: usize, available: usize },

    #[error("N = {n} unreachable: only {available} distinct gallery items can be retrieved")]
    Unreachable { n: usize, available: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("{0} contamination entries are still pending review")]
    PendingConfirmations(usize),

    #[error("digest mismatch for {what}: recorded {recorded}, computed {computed}")]
    DigestMismatch {
        what: String,
        recorded: String,
        computed: String,
    },

    #[error("id collision: item {item_id} appears in queries and gallery with split tag {split_tag:?} but different source images")]
    IdCollision { item_id: u64, split_tag: String },

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code used by the CLI: 2 validation, 3 unreachable N,
    /// 4 pending confirmations, 5 digest mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Unreachable { .. } => 3,
            Error::PendingConfirmations(_) => 4,
            Error::DigestMismatch { .. } => 5,
            Error::Io { .. } | Error::Locked(_) => 1,
            _ => 2,
        }
    }
}
