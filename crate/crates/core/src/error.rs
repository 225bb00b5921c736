use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geo point ({lat}, {lng})")]
    InvalidPoint { lat: f64, lng: f64 },

    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: String, reason: String },

    #[error("degenerate geometry: consecutive points coincide")]
    DegenerateGeometry,

    #[error("invalid time interval {0} s")]
    InvalidInterval(f64),

    #[error("feature map {spec} needs the {context} annotation, which was never applied")]
    MissingContext { spec: String, context: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("spec mismatch: expected {expected}, found {found}")]
    SpecMismatch { expected: String, found: String },

    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("not a probability distribution (sum = {0})")]
    NotADistribution(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("too few distinct points for k-means: {distinct} distinct, k = {k}")]
    TooFewPoints { distinct: usize, k: usize },

    #[error("cluster {0} has no members")]
    EmptyCluster(usize),

    #[error("too sparse: {available} of {required} maps present for driver {driver}")]
    TooSparse {
        driver: String,
        available: usize,
        required: usize,
    },

    #[error("training labels contain a single class")]
    DegenerateLabels,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("model/artifact mismatch: {0}")]
    ModelMismatch(String),

    #[error("driver set mismatch: {0}")]
    DriverSetMismatch(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("driver {driver}, spec {spec}: {source}")]
    Provenance {
        driver: String,
        spec: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Validation errors map to exit code 2 in the CLI; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::ConfigInvalid(_)
            | Error::Parse { .. }
            | Error::InvalidPoint { .. }
            | Error::InvalidTrajectory { .. }
            | Error::ModelMismatch(_)
            | Error::DriverSetMismatch(_) => true,
            Error::Provenance { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
