use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is missing, has the wrong type, or is out of range.
    #[error("config error: {0}")]
    Config(String),

    /// An API was called with arguments that violate its contract
    /// (shape mismatches, empty batches, out-of-range indices).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite value or otherwise diverged.
    #[error("training error: {0}")]
    Training(String),

    /// The scripted demonstrator could not produce a path to the goal.
    #[error("demonstrator error: {0}")]
    Demonstrator(String),

    /// A file on disk does not match the expected format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
