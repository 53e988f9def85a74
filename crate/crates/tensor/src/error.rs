use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Inconsistent shapes or hyper-parameters handed to an operation.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensor has {actual} elements but shape {shape:?} requires {expected}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("batchnorm2d in train mode needs at least 2 values per channel, got {0}")]
    InvalidBatch(usize),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("training diverged: non-finite gradient in parameter `{0}`")]
    Diverged(String),

    #[error("{0}")]
    Config(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
