use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("waveform has {len} samples, shorter than one {frame}-sample frame")]
    InputTooShort { len: usize, frame: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("missing audio file {}", .0.display())]
    MissingAudio(PathBuf),

    #[error("feature cache invalidated: {0}")]
    CacheInvalidated(String),

    #[error("non-finite value in {0}")]
    NumericalError(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible branch: {0}")]
    IncompatibleBranch(String),

    #[error("no branch {index} (state has {count})")]
    NoSuchBranch { index: usize, count: usize },

    #[error("unknown variant {0:?}")]
    InvalidVariant(String),

    #[error("class {0:?} has no embeddings")]
    EmptyClass(String),

    #[error("covariance is singular after regularization")]
    SingularCovariance,

    #[error("classifier has no classes")]
    NoClasses,

    #[error("duplicate class {0:?}")]
    DuplicateClass(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("step {step} exceeds total {total}")]
    InvalidStep { step: usize, total: usize },

    #[error("replay store has no statistics for class {0:?}")]
    IncompleteReplayStore(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported parameters: {0}")]
    UnsupportedParameters(String),

    #[error("statistics need at least two methods, got {0}")]
    RequiresTwoMethods(usize),

    #[error("run did not complete: {0}")]
    RunIncomplete(String),

    #[error("every run failed: {0}")]
    AllRunsFailed(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by the user's configuration or arguments rather than
    /// by a failure during execution.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidSpec(_)
                | Error::InvalidVariant(_)
                | Error::UnsupportedParameters(_)
                | Error::RequiresTwoMethods(_)
        )
    }
}
