//! Error type shared by every module in the crate.
//!
//! Variants are grouped by how the CLI reports them: usage problems exit
//! with code 1, data and format problems with code 2, numeric failures
//! with code 3. Library callers match on the variant directly.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PbanError>;

#[derive(Debug, Error)]
pub enum PbanError {
    /// Invalid argument or configuration value supplied by the caller.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor has the wrong rank or extent for an operation.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// Input bytes are not in a recognized container format.
    #[error("format error: {0}")]
    Format(String),

    /// A recognized container failed to decode (truncation, corruption).
    #[error("decode error: {0}")]
    Decode(String),

    /// Well-formed input that violates a dataset-level requirement.
    #[error("data error: {0}")]
    Data(String),

    /// Text input failed to parse; `location` names the file and line or row.
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An operator produced NaN or infinity.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// A correlation or fit has no defined value for the given inputs.
    #[error("metric undefined: {0}")]
    Undefined(String),

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("contract violation: {0}")]
    Contract(String),
}

impl PbanError {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PbanError::Parameter(_) => 1,
            PbanError::ShapeMismatch { .. }
            | PbanError::Dimension { .. }
            | PbanError::Format(_)
            | PbanError::Decode(_)
            | PbanError::Data(_)
            | PbanError::Parse { .. }
            | PbanError::Io { .. } => 2,
            PbanError::NonFinite { .. } | PbanError::Undefined(_) | PbanError::Contract(_) => 3,
        }
    }

    /// Helper for I/O errors so call sites keep the path annotation.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PbanError::Io {
            path: path.into(),
            source,
        }
    }
}
