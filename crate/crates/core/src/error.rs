use std::path::PathBuf;

use crate::checkpoint::CompatReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("bad magic bytes in {path:?}")]
    BadMagic { path: PathBuf },

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated data region: header describes {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("tensor extents overlap or are out of order at {name:?}")]
    Overlap { name: String },

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(CompatReport),

    #[error("architecture mismatch: expected {expected:?}, found {found:?}")]
    Architecture { expected: String, found: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { node: node.into(), detail: detail.into() }
    }

    /// Stable machine-readable kind, used for CLI error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Overlap { .. } => "overlap",
            Error::Header(_) => "header",
            Error::Incompatible(_) => "incompatible",
            Error::Architecture { .. } => "architecture",
            Error::Degenerate(_) => "degenerate",
            Error::StageOrder(_) => "stage_order",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
