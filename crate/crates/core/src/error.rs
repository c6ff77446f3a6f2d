use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm is zero")]
    DegenerateVector,

    #[error("empty vector")]
    EmptyVector,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("kappa {kappa} out of range for {n} classifiers")]
    KappaOutOfRange { kappa: usize, n: usize },

    #[error("soft-KNN result carries no tape (kappa == N short-circuit or hard routing)")]
    MissingTape,

    #[error("classifier index {index} out of range ({n} classifiers)")]
    ClassifierIndex { index: usize, n: usize },

    #[error("label is not one-hot")]
    NotOneHot,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected \"EMBD\"")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unexpected end of data")]
    UnexpectedEnd,

    #[error("trailing bytes after {0} records")]
    TrailingData(u64),

    #[error("label out of range: {label} >= {n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("non-finite value in record {0}")]
    NonFiniteRecord(u64),

    #[error("dataset has no examples")]
    EmptyDataset,

    #[error("class {0} has no examples")]
    MissingClass(usize),

    #[error("csv: {0}")]
    Csv(String),

    #[error("stream plan does not match dataset: {0}")]
    PlanMismatch(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("accuracy matrix: {0}")]
    IncompleteMatrix(String),

    #[error("forgetting needs at least two training stages, got {0}")]
    TooFewStages(usize),

    #[error("reports have mixed configurations: {0}")]
    MixedConfigs(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
