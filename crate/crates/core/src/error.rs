use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial {initial}")]
    TrainingDiverged { step: usize, loss: f64, initial: f64 },

    #[error("aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("guidance hook failed at sampling step {step}: {source}")]
    Guidance {
        step: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for LabError {
    fn from(e: toml::de::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for LabError {
    fn from(e: toml::ser::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

impl From<safetensors::SafeTensorError> for LabError {
    fn from(e: safetensors::SafeTensorError) -> Self {
        LabError::Serde(e.to_string())
    }
}

macro_rules! bail_arg {
    ($($arg:tt)*) => {
        return Err($crate::error::LabError::InvalidArgument(format!($($arg)*)))
    };
}
pub(crate) use bail_arg;
