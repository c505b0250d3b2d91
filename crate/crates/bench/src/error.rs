use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] decomp_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown experiment kind `{0}`")]
    UnknownKind(String),
}

impl BenchError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        BenchError::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io { path: path.into(), source }
    }

    /// Short machine-readable category.
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::Core(decomp_core::Error::Divergence { .. }) => "divergence",
            BenchError::Core(decomp_core::Error::ShapeMismatch { .. }) => "shape-mismatch",
            BenchError::Core(decomp_core::Error::MalformedModel(_)) => "malformed-model",
            BenchError::Core(decomp_core::Error::VersionMismatch { .. }) => "version-mismatch",
            BenchError::Core(_) => "core",
            BenchError::Io { .. } => "io",
            BenchError::Json(_) => "json",
            BenchError::InvalidConfig(_) => "invalid-config",
            BenchError::UnknownKind(_) => "unknown-kind",
        }
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
