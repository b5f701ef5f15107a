use std::path::PathBuf;

use crate::model_io::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("model validation failed with {} violation(s): {}", .0.len(), join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
