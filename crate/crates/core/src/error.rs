use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("record {index}: {source}")]
    Record { index: usize, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used by the CLI for machine-parseable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::DegenerateRow { .. } => "degenerate-row",
            Error::NonFinite(_) => "non-finite",
            Error::Index { .. } => "index",
            Error::EmptyInput => "empty-input",
            Error::Config(_) => "config",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::Parse { .. } => "parse",
            Error::Corrupt(_) => "corrupt",
            Error::Diverged { .. } => "diverged",
            Error::Record { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn at_record(index: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Record {
        index,
        source: Box::new(e),
    }
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
