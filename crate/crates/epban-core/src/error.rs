//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape violates an operation's constraint.
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// Too little data for the operation to be defined (e.g. std over one element).
    #[error("{op}: degenerate input: {msg}")]
    Degenerate { op: &'static str, msg: String },

    /// An API contract was violated by the caller (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// User-supplied value outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed file content, with the byte offset where parsing failed.
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    /// Checkpoint container problems (version, manifest, payload length).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A loss or gradient stopped being finite; carries the parameter or
    /// tensor name for diagnosis.
    #[error("non-finite {what} in {context}")]
    NonFinite {
        what: &'static str,
        context: String,
    },

    /// Correlation undefined because one input has zero variance.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from user input rather than a failure
    /// during computation. The CLI maps this to exit code 1 vs 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Format { .. } | Error::InvalidShape { .. }
        )
    }
}
