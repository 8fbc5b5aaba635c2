use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value at coordinate {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("log-likelihood decreased at EM iteration {iteration}: {before} -> {after}")]
    NonMonotoneLikelihood {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed binary data at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
