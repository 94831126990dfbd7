use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] bls_core::Error),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

impl HarnessError {
    /// 0 success, 1 validation or runtime failure, 2 config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(bls_core::Error::InvalidParameter { .. }) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
