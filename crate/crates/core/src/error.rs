use thiserror::Error;

/// Errors raised anywhere in the training engine.
#[derive(Debug, Error)]
pub enum MsrlError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("batch construction failed for group {group}: {reason}")]
    BatchConstruction { group: String, reason: String },

    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MsrlError {
    /// Process exit code for the CLI: 2 validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            MsrlError::Validation(_)
            | MsrlError::Dimension { .. }
            | MsrlError::Version { .. }
            | MsrlError::Parse(_)
            | MsrlError::Json(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        MsrlError::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, MsrlError>;
