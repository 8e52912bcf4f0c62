use thiserror::Error;

/// Errors produced by tensor ops, model assembly, training, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },

    #[error("attention bias built for {expected} tokens, feature map has {got}")]
    BiasExtentMismatch { expected: usize, got: usize },

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("dtype mismatch: expected {expected}, got {got}")]
    DtypeMismatch { expected: &'static str, got: String },

    #[error("in stage {stage}: {source}")]
    InStage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Wrap an error with the name of the model stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::InStage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
