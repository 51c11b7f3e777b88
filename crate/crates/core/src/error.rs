use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, missing stage).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared during evaluation.
    #[error("numeric fault at node {node} ({op}): {detail}")]
    NumericFault { node: usize, op: &'static str, detail: String },

    /// Malformed PPM image.
    #[error("ppm parse error at byte {offset}: {reason}")]
    Ppm { offset: usize, reason: String },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated at byte {offset}")]
    Truncated { offset: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("annotation: {0}")]
    Annotation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns a contract violation unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
