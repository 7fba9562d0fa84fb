use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can surface.
#[derive(Debug, Error)]
pub enum LmrlError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("supervision error: {0}")]
    Supervision(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl LmrlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LmrlError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        LmrlError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable category used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            LmrlError::Shape { .. } => "shape",
            LmrlError::Config(_) => "config",
            LmrlError::Usage(_) => "usage",
            LmrlError::Generation(_) => "generation",
            LmrlError::Annotation(_) => "annotation",
            LmrlError::Supervision(_) => "supervision",
            LmrlError::Data(_) => "data",
            LmrlError::Training(_) => "training",
            LmrlError::MissingParam(_) => "param",
            LmrlError::Io { .. } => "io",
            LmrlError::Format { .. } => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, LmrlError>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(LmrlError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
