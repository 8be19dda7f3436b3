use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix of dimension {dim} is not positive definite (jitter escalated to {max_jitter:e})")]
    NotPositiveDefinite { dim: usize, max_jitter: f64 },

    #[error("site {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },

    #[error("sites {first} and {second} coincide (distance {distance:e})")]
    DuplicateSites {
        first: usize,
        second: usize,
        distance: f64,
    },

    #[error("design matrix is rank deficient ({rows} rows, {cols} columns)")]
    RankDeficient { rows: usize, cols: usize },

    #[error("expected {expected} forecasts, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid forecast for agent {agent} at site {site}: {reason}")]
    InvalidForecast {
        site: usize,
        agent: usize,
        reason: String,
    },

    #[error("no observations")]
    EmptyData,

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("Polya-gamma sampler did not accept within {rounds} rounds")]
    SamplerStall { rounds: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),

    #[error("artifact does not match the input: {0}")]
    ArtifactMismatch(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// Unwraps iteration context, returning the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of a numerical routine (factorization, sampler stall).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NotPositiveDefinite { .. } | Error::RankDeficient { .. } | Error::SamplerStall { .. }
        )
    }
}
