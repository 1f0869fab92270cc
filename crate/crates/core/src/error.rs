use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector: row {row} has norm {norm:e}")]
    ZeroVector { row: usize, norm: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate region of interest: extent {extent:e} pixels")]
    DegenerateRoi { extent: f64 },

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),

    #[error("class {0} has no support instance")]
    EmptyClass(usize),

    #[error("guidance sequence is empty")]
    EmptyGuidance,

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("bad data: {0}")]
    BadData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Coarse category used for process exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::ZeroVector { .. } | Error::DegenerateRoi { .. }
        )
    }
}
