use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Array shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value became NaN or infinite during evaluation.
    #[error("non-finite value at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    /// Input data is outside the range an operation accepts.
    #[error("invalid data: {0}")]
    Data(String),

    /// A result is only partially defined for the given input.
    #[error("partial result: {0}")]
    Partial(String),

    /// Configuration failed validation. Every offending key is listed.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A training or pipeline step failed at runtime.
    #[error("run failed: {0}")]
    Run(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
