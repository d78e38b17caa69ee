use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} elements, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("graph node {0} has not been evaluated; run forward first")]
    NotEvaluated(usize),

    #[error("invalid node id {0}")]
    InvalidNode(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {index}: {message}")]
    Layer { index: usize, message: String },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by user-provided configuration or inputs
    /// rather than by a failure during computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Layer { .. } | Error::Json(_) | Error::Parse { .. }
        )
    }
}
