use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("size error: requested {requested} rows but only {available} available")]
    Size { requested: usize, available: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite loss at step {step} (restart {restart}): {detail}")]
    Numeric {
        step: usize,
        restart: usize,
        detail: String,
    },

    #[error("controller already terminated")]
    State,

    #[error("training failed for config #{index}: {source}")]
    Lambda {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl Error {
    /// Short machine-readable tag, used when a failure is logged into a result row.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Size { .. } => "size",
            Error::Domain(_) => "domain",
            Error::Numeric { .. } => "numeric",
            Error::State => "state",
            Error::Lambda { source, .. } => source.code(),
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
