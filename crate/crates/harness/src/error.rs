use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] promptq_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Serialize(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for failed
    /// verifications, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(promptq_core::Error::Config(_)) => 2,
            HarnessError::Verification(_) => 3,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
