use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}")]
    InvalidGroups { groups: usize, in_channels: usize, out_channels: usize },
    #[error("dropout probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("invalid scale {0}: must be positive and finite")]
    InvalidScale(f64),

    #[error("series of length {0} is too short to normalize (need at least 2 steps)")]
    TooShort(usize),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("invalid model configuration: {0}")]
    ConfigInvalid(String),
    #[error("empty cut: delay {delay} with query length {query_len} leaves no steps of a {len}-step history")]
    EmptyCut { delay: usize, query_len: usize, len: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("series of {rows} rows is too short for history {history} and horizon {horizon}")]
    SeriesTooShort { rows: usize, history: usize, horizon: usize },
    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("in-sample series is flat at seasonal lag {0}; MASE scale is zero")]
    ZeroScale(usize),
    #[error("in-sample series of length {len} is not longer than seasonal period {period}")]
    InsampleTooShort { len: usize, period: usize },
    #[error("reference metric must be positive, got {0}")]
    InvalidReference(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
