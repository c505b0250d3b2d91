use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("output node {node} is not a scalar (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("inconsistent shapes in model: {0}")]
    ShapeInconsistency(String),

    #[error("invalid architecture descriptor: {0}")]
    InvalidDescriptor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("feature groups share {0} coordinates")]
    OverlappingGroups(usize),

    #[error("unsupported pairing: {0}")]
    Unsupported(String),

    #[error("training diverged at {stage} {index}")]
    Divergence { stage: &'static str, index: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
