use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::Contract {
        op,
        msg: msg.into(),
    }
}
