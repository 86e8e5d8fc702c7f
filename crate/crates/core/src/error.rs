use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate experimentation probability at point {0}")]
    DegenerateExperimentation(usize),

    #[error("design does not match covariate space: {0}")]
    Misaligned(String),

    #[error("predictor not fitted")]
    PredictorNotFitted,

    #[error("insufficient labeled data: {have} labeled records, need at least {need}")]
    InsufficientLabeled { have: usize, need: usize },

    #[error("fold starvation: fold {fold} has no labeled records (try fewer folds)")]
    FoldStarvation { fold: usize },

    #[error("trace not adaptive-complete: {0}")]
    TraceIncomplete(String),

    #[error("unknown stratum {0}")]
    UnknownStratum(usize),

    #[error("empty stratum {0}")]
    EmptyStratum(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("trace record {index}: {message}")]
    TraceSchema { index: usize, message: String },

    #[error("starvation: {treated} of {target} treated units after {samples} samples")]
    Starvation {
        treated: usize,
        target: usize,
        samples: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
