use diffcore::DiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion failed with {} problem(s): {}", .0.len(), summarize(.0))]
    Ingest(Vec<(usize, String)>),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    #[error("frozen base weights changed: {0}")]
    FrozenViolation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Short machine-readable kind for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Diff(_) => "diff",
            CoreError::Contract { .. } => "contract",
            CoreError::Config(_) => "config",
            CoreError::Ingest(_) => "ingest",
            CoreError::Checkpoint(_) => "checkpoint",
            CoreError::Checksum(_) => "checksum",
            CoreError::Diverged { .. } => "diverged",
            CoreError::FrozenViolation(_) => "frozen_violation",
            CoreError::Io(_) => "io",
            CoreError::Json(_) => "json",
        }
    }
}

fn summarize(problems: &[(usize, String)]) -> String {
    problems
        .iter()
        .take(5)
        .map(|(line, msg)| format!("line {line}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::Contract {
        op,
        msg: msg.into(),
    }
}
