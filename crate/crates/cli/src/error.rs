use std::fmt;

use thiserror::Error;

/// One invalid configuration field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &str, message: String) -> Self {
        Self {
            field: field.to_string(),
            message,
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join(errs: &[FieldError]) -> String {
    errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {}", join(.0))]
    Config(Vec<FieldError>),

    #[error("malformed configuration: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("{0}: {1}")]
    Io(String, std::io::Error),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Core(#[from] mvbismut::Error),

    #[error("{0}")]
    Unsupported(String),
}
