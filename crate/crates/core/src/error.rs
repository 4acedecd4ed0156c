use thiserror::Error;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in dialogue {dialogue} turn {turn}: {message}")]
    Parse { dialogue: String, turn: usize, message: String },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("dialogue {dialogue} turn {turn}: state is not monotone-consistent ({message})")]
    Monotone { dialogue: String, turn: usize, message: String },
    #[error("labeling conflict in dialogue {dialogue} turn {turn}: slots {slots:?}")]
    LabelConflict { dialogue: String, turn: usize, slots: Vec<String> },
    #[error("config error: {0}")]
    Config(String),
    #[error("input of {len} tokens exceeds max_len {max_len}")]
    Oversize { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("undefined confidence: {0}")]
    UndefinedConfidence(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("proto-DST failed to start after {restarts} restarts: {diagnostic}")]
    RestartBudget { restarts: usize, diagnostic: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown {kind}: {value}")]
    Unknown { kind: &'static str, value: String },
}

impl DstError {
    /// Short machine-readable kind used by the CLI's error record.
    pub fn kind(&self) -> &'static str {
        match self {
            DstError::Io { .. } => "io",
            DstError::Parse { .. } => "parse",
            DstError::Schema(_) => "schema_mismatch",
            DstError::Monotone { .. } => "monotone_consistency",
            DstError::LabelConflict { .. } => "labeling_conflict",
            DstError::Config(_) => "config",
            DstError::Oversize { .. } => "oversize",
            DstError::TokenOutOfRange { .. } => "token_out_of_range",
            DstError::Dimension(_) => "dimension_mismatch",
            DstError::Numeric(_) => "numeric",
            DstError::UndefinedConfidence(_) => "undefined_confidence",
            DstError::Empty(_) => "empty_input",
            DstError::Diverged { .. } => "diverged",
            DstError::RestartBudget { .. } => "restart_budget_exhausted",
            DstError::Checkpoint(_) => "checkpoint",
            DstError::Unknown { .. } => "unknown_value",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DstError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, DstError>;
