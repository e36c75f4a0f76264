use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}
