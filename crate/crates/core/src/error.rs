use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("i/o error on {path}: {source}")]
    File {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt dump: expected {expected} payload bytes, found {actual}")]
    Corruption { expected: u64, actual: u64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("coverage error: {} missing: {}", .what, .missing.join(", "))]
    Coverage { what: String, missing: Vec<String> },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable identifier for the error family.
    pub fn id(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::File { .. } => "io",
            Error::Format(_) => "format",
            Error::Corruption { .. } => "corruption",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Consistency(_) => "consistency",
            Error::Coverage { .. } => "coverage",
            Error::Parameter(_) => "parameter",
            Error::Geometry(_) => "geometry",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn file(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::File {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
