use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("measurement failed: {0}")]
    MeasurementFailed(String),
    #[error("labels contain a single class; both healthy and fractured samples are required")]
    DegenerateLabels,
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),
    #[error("singular least-squares system: {0}")]
    SingularFit(String),
    #[error("calibration of kind {0} cannot be inverted; use a two-point linear calibration")]
    UnsupportedInversion(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid-config",
            Error::OutOfRange(_) => "out-of-range",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::EmptyInput(_) => "empty-input",
            Error::MeasurementFailed(_) => "measurement-failed",
            Error::DegenerateLabels => "degenerate-labels",
            Error::DegenerateCalibration(_) => "degenerate-calibration",
            Error::SingularFit(_) => "singular-fit",
            Error::UnsupportedInversion(_) => "unsupported-inversion",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
