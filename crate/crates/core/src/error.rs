//! Error type shared across the numeric core.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}{}", fmt_step(.step))]
    NonFinite { op: &'static str, step: Option<usize> },

    #[error("sequence too short for {op}: length {len}, need at least {min}")]
    SequenceTooShort { op: &'static str, len: usize, min: usize },

    #[error("empty input for {op}")]
    Empty { op: &'static str },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite gradient in parameter {name}")]
    BadGradient { name: String },

    #[error("missing phase mark '{label}' in trial {trial}")]
    MissingPhaseMark { label: &'static str, trial: String },
}

fn fmt_step(step: &Option<usize>) -> String {
    match step {
        Some(s) => alloc::format!(" at step {s}"),
        None => String::new(),
    }
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn parameter(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Parameter {
            op,
            detail: detail.into(),
        }
    }
}
