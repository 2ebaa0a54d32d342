use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the alignment and risk-prediction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("correlation undefined: both inputs are constant")]
    UndefinedCorrelation,

    #[error("optimization diverged at {stage} iteration {iteration}: non-finite loss")]
    Divergence { stage: String, iteration: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDivergence { epoch: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("bootstrap unstable: {undefined} of {resamples} resamples undefined")]
    BootstrapInstability { undefined: usize, resamples: usize },

    #[error("invalid phantom spec: {0}")]
    PhantomSpec(String),

    #[error("label data error: {0}")]
    LabelData(String),

    #[error("preprocessing failed: {0}")]
    Preprocess(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
