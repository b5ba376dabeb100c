//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: config and
//! usage problems exit 2, runtime failures exit 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnitError {
    /// Malformed or contradictory configuration (bad flag value, unknown
    /// config key, missing required path). CLI exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside its contract (dimension mismatch,
    /// empty input where nonempty is required). CLI exit code 2.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violated the format (bad JSONL row, malformed
    /// `::`-delimited row, missing key). Carries enough context to find the
    /// offending line.
    #[error("data error: {0}")]
    Data(String),

    /// A binary artifact (embedding cache, checkpoint) failed to parse.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Training produced a non-finite loss; carries the batch diagnostic.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl UnitError {
    /// True for errors the CLI reports as misuse (exit 2) rather than
    /// runtime failure (exit 1).
    pub fn is_usage(&self) -> bool {
        matches!(self, UnitError::Config(_) | UnitError::Usage(_))
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        UnitError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        UnitError::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, UnitError>;
