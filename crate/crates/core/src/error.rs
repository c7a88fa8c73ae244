use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, out of range, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call-site argument violates a precondition (shape, range, id).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is well-formed but numerically degenerate (zero norm, non-finite).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Loss or gradient became non-finite during training.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// Checkpoint container failed validation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset on disk does not match what the config expects.
    #[error("stale dataset: {0}")]
    StaleDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
