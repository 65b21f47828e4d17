use thiserror::Error;

use crate::metrics::Arm;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown response `{0}`")]
    UnknownResponse(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("{0} arm has no units")]
    EmptyArm(Arm),

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("metric `{0}` is not a ratio metric")]
    NotARatioMetric(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("missing predictions: {0}")]
    MissingPredictions(String),

    #[error("treatment-arm predictions h(x, 1) are required")]
    MissingTreatmentPredictions,

    #[error("empty training set for fit mode {0}")]
    EmptyTrainingSet(String),

    #[error("model has not been fitted")]
    UnfittedModel,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("correlation {0} is outside [-1, 1]")]
    RhoOutOfRange(f64),

    #[error("CI reduction {0} is outside [0, 1)")]
    ReductionOutOfRange(f64),

    #[error("jackknife bucket {0} is empty")]
    EmptyBucket(usize),

    #[error("estimator failed on {failed} of {buckets} leave-one-bucket-out subsets: {message}")]
    EstimatorDomainViolation {
        failed: usize,
        buckets: usize,
        message: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("sample size {requested} exceeds population size {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed input data or column declarations.
    pub fn is_schema(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::UnknownResponse(_)
                | Error::UnknownFeature(_)
                | Error::Csv(_)
                | Error::MissingPredictions(_)
        )
    }

    /// True for errors raised because data falls outside an estimator's domain.
    pub fn is_domain(&self) -> bool {
        matches!(
            self,
            Error::DomainViolation(_)
                | Error::EmptyArm(_)
                | Error::NotARatioMetric(_)
                | Error::DegenerateVariance(_)
                | Error::EstimatorDomainViolation { .. }
                | Error::InvalidTransform(_)
        )
    }
}
