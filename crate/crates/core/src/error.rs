use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum NssdaError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("positivity violated in {context}: {detail}")]
    Positivity {
        context: &'static str,
        detail: String,
    },

    #[error("solver diverged (non-finite state) at step {step}")]
    SolverDivergence { step: usize },

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("ensemble collapsed (all members non-finite) at step {step}")]
    EnsembleCollapse { step: usize },

    #[error("numerical error in {context}: {detail}")]
    Numerical {
        context: &'static str,
        detail: String,
    },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl NssdaError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        NssdaError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, NssdaError>;
