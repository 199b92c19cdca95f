//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by model construction, estimation, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A domain value violated its invariant (bad damping ratio, empty mode
    /// list, non-increasing grid, ...). The message names the offending field.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two inputs that must agree (lengths, grids, channels) do not.
    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    /// The force auto-spectrum vanished at a bin, so the H1 ratio is undefined
    /// there.
    #[error("force auto-spectrum is zero at bin {bin} ({freq_hz} Hz); H1 ratio undefined")]
    ZeroForcePower { bin: usize, freq_hz: f64 },

    /// Cholesky factorization failed even after escalating diagonal jitter.
    #[error("factorization failed after jitter escalation up to {max_jitter:e}")]
    Factorization { max_jitter: f64 },

    /// A test grid does not overlap the fitted band; scoring would require
    /// extrapolation, which is refused.
    #[error("band mismatch: {0}")]
    BandMismatch(String),

    /// Malformed CSV content, with a 1-based line number.
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Csv {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 for input problems, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Factorization { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
