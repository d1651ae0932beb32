use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: expected {expected}, got {got}{}", context_suffix(.context))]
    ShapeMismatch {
        expected: String,
        got: String,
        context: String,
    },

    #[error("time {t} outside velocity domain [0, {limit})")]
    TimeOutOfDomain { t: f64, limit: f64 },

    #[error("non-finite value in {what}{}", step_suffix(.step))]
    NonFinite { what: String, step: Option<usize> },

    #[error("degenerate trajectory: zero-length chord with non-coincident interior points")]
    DegenerateTrajectory,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range [0, {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

fn step_suffix(step: &Option<usize>) -> String {
    match step {
        Some(s) => format!(" at step {s}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
