use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The acceptance filter rejects everything across the prior's bulk.
    #[error("empty posterior: {0}")]
    EmptyPosterior(String),

    #[error(
        "predictive grid misses too much mass ({integral:.4} captured); extend the {tail} tail"
    )]
    GridCoverage { integral: f64, tail: &'static str },

    #[error("channel `{channel}` has no variability value for {stage}")]
    MissingStage { channel: String, stage: String },

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("duplicate channel `{0}`")]
    DuplicateChannel(String),

    #[error("scenario error at `{path}`: {message}")]
    Scenario { path: String, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of what was being done.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for problems with user input (bad scenario, bad arguments),
    /// as opposed to failures while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Scenario { .. }
            | Error::DuplicateChannel(_)
            | Error::UnknownChannel(_)
            | Error::Domain(_) => true,
            Error::Context { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{name} must be finite and > 0, got {value}"
        )))
    }
}
