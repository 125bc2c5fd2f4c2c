use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got} in {context}")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: &'static str,
    },
    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { index: usize, context: String },
    #[error("degenerate 6d rotation input at frame {frame}, joint {joint}: {reason}")]
    DegenerateRotation {
        frame: usize,
        joint: usize,
        reason: &'static str,
    },
    #[error("not a rotation matrix: {0}")]
    NotARotation(String),
    #[error("zero-norm vector cannot be normalized ({0})")]
    ZeroNorm(&'static str),
    #[error("fully masked attention row {0}")]
    FullyMaskedRow(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid covariance: eigenvalue {0} below tolerance")]
    InvalidCovariance(f64),
    #[error("malformed clip container: {0}")]
    MalformedContainer(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
