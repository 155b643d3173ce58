use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no interactions survive {k}-core filtering")]
    EmptyAfterFilter { k: usize },

    #[error("holdout stage is empty after removing unseen users and items")]
    EmptyHoldout,

    #[error("stage {stage} out of range (table has {stages} stages)")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("stage {0} has no interactions")]
    EmptyStage(usize),

    #[error("cannot split last stage into {requested} sub-stages: only {distinct} distinct timestamps")]
    DegenerateSubstages { requested: usize, distinct: usize },

    #[error("index {index} out of range for {kind} (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("popularity value must be positive, got {0}")]
    NonPositivePopularity(f64),

    #[error("forecast has no entry for item {0}")]
    MissingForecast(usize),

    #[error("user {0} has interacted with every item; no negative can be drawn")]
    NoNegativeCandidate(usize),

    #[error("non-finite gradient at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("no validation user can be evaluated")]
    NoValidationUsers,

    #[error("cannot form {groups} groups from {items} items")]
    TooFewItems { groups: usize, items: usize },

    #[error("degenerate simulation world: {0}")]
    DegenerateWorld(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("report mismatch: {0}")]
    ReportMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig(message.into())
    }
}
