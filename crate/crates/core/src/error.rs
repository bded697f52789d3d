use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("identity index space exhausted after {attempts} proposals")]
    CapacityExhausted { attempts: usize },

    #[error("storage error on {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("sampler configuration mismatch: model {model}, request {request}")]
    ConfigMismatch { model: String, request: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{name} = {value} outside {range}")]
    Range {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("rejection sampling gave up after {attempts} attempts")]
    RejectionExhausted { attempts: usize },

    #[error("missing metadata: {0}")]
    Metadata(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("reference pool too small: need {needed}, have {have}")]
    EmptyPool { needed: usize, have: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
