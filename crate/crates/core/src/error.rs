use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config syntax error: {0}")]
    ConfigSyntax(String),
    #[error("invalid config field `{field}`: {reason}")]
    ConfigValidation { field: String, reason: String },
    #[error("archive format error: {0}")]
    ArchiveFormat(String),
    #[error("archive corrupt: {0}")]
    ArchiveCorrupt(String),
    #[error("scene graph error: {0}")]
    Graph(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("image format error: {0}")]
    ImageFormat(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("teacher embedding not found for item `{0}`")]
    TeacherLookup(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("unknown fusion variant `{0}`")]
    Variant(String),
    #[error("empty response: {0}")]
    EmptyResponse(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("gradient check failed for `{tensor}`: relative error {error:e} > {tolerance:e}")]
    GradientCheck {
        tensor: String,
        error: f64,
        tolerance: f64,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::ConfigValidation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from bad user input (as opposed to a failure while running).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ConfigSyntax(_)
                | Error::ConfigValidation { .. }
                | Error::Variant(_)
                | Error::GradientCheck { .. }
                | Error::Value(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
