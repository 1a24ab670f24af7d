use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pruning pipeline.
///
/// Variants are grouped into coarse categories (see [`ErrorKind`]) so the
/// command line front end can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum ClpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("missing artifact {path:?}; run `clp {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Lineage,
    Other,
}

impl ClpError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ClpError::Config(_) | ClpError::Contract(_) => ErrorKind::Config,
            ClpError::Data(_)
            | ClpError::MissingArtifact { .. }
            | ClpError::Checkpoint(_)
            | ClpError::Io { .. }
            | ClpError::Json(_) => ErrorKind::Data,
            ClpError::NumericDomain(_) | ClpError::Diverged { .. } | ClpError::Shape(_) => {
                ErrorKind::Numeric
            }
            ClpError::Lineage(_) => ErrorKind::Lineage,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClpError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClpError>;
