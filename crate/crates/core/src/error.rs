use std::path::PathBuf;

use fan_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("sample has no visible landmarks")]
    EmptySample,

    #[error("degenerate bounding box (w={w}, h={h})")]
    DegenerateBbox { w: f64, h: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("yaw bin {bin} has {have} samples, {need} required")]
    InsufficientBin { bin: String, have: usize, need: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// NaN/Inf activations, gradients or losses.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Tensor(TensorError::NonFinite { .. } | TensorError::Diverged(_))
        )
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
