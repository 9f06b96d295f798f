use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward from a non-scalar output of shape {0:?} needs an explicit seed")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("batch norm in training mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input of size {height}x{width} is not divisible by {factor}; resize it first")]
    IndivisibleInput {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("ROI schema: {0}")]
    Schema(String),
    #[error("ROI center ({row}, {col}) projects to ({i}, {j}), outside the {map_height}x{map_width} feature map")]
    ProjectionOutOfBounds {
        row: usize,
        col: usize,
        i: usize,
        j: usize,
        map_height: usize,
        map_width: usize,
    },
    #[error("no context attention has been recorded for gender {0}")]
    EmaUninitialized(u8),
    #[error("context attention average cannot be updated in inference mode")]
    EmaInInference,
    #[error("sample `{id}`: {reason}")]
    Sample { id: String, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::ShapeMismatch { op, detail }
    }
}
