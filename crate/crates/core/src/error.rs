use std::io;

use thiserror::Error;

/// Errors raised anywhere in the backend.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("duplicate sample id '{0}'")]
    DuplicateId(String),
    #[error("unknown sample id '{0}'")]
    UnknownId(String),
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("need at least 2 usable speakers, found {0}")]
    InsufficientSpeakers(usize),
    #[error("singular within-class scatter; retry with a ridge of at least {suggested_ridge:e}")]
    SingularScatter { suggested_ridge: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("EM covariance collapse at iteration {iteration}: {detail}")]
    CovarianceCollapse { iteration: usize, detail: String },
    #[error("zero vector before length normalization")]
    DegenerateEmbedding,
    #[error("cohort scores have zero spread")]
    DegenerateCohort,
    #[error("no valid target trials")]
    NoValidTargets,
    #[error("no valid impostor trials")]
    NoValidImpostors,
    #[error("non-finite gradient in parameter group '{0}'")]
    NonFiniteGradient(String),
    #[error("training diverged at stage {stage}, minibatch {minibatch}")]
    Divergence { stage: usize, minibatch: usize },
    #[error("stage/parameter mismatch: {0}")]
    StageMismatch(String),
    #[error("missing duration for sample '{0}'")]
    MissingDuration(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 2 for validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularScatter { .. }
            | Error::NotPositiveDefinite(_)
            | Error::CovarianceCollapse { .. }
            | Error::DegenerateEmbedding
            | Error::DegenerateCohort
            | Error::NonFiniteGradient(_)
            | Error::Divergence { .. }
            | Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
