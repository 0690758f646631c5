//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KtpError {
    /// Tensor shape disagreement; both sides are reported in full.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Invalid argument, config value, or file content.
    #[error("validation: {0}")]
    Validation(String),

    /// Parse failure in a structured text or binary format.
    /// `offset` is a byte offset into the input where the failure was detected.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Non-finite value where a finite one is required.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl KtpError {
    /// Process exit code contract: 1 validation, 2 numerical, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            KtpError::ShapeMismatch { .. } | KtpError::Validation(_) | KtpError::Parse { .. } => 1,
            KtpError::Numerical(_) => 2,
            KtpError::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, KtpError>;

/// Shorthand for `KtpError::Io` carrying the offending path.
pub fn io_err(path: &std::path::Path, source: std::io::Error) -> KtpError {
    KtpError::Io {
        path: path.display().to_string(),
        source,
    }
}
