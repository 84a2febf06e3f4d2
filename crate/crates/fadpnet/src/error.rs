use thiserror::Error;

/// Failures surfaced by the harness, grouped by process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Model(fadpnet_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// 2 for configuration problems, 3 for data problems, 4 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Numerical(_) => 4,
            Self::Model(e) => match e {
                fadpnet_core::Error::Config(_) | fadpnet_core::Error::UnknownFlag(_) => 2,
                fadpnet_core::Error::Numerical(_) => 4,
                fadpnet_core::Error::Degenerate(_) | fadpnet_core::Error::Shape(_) => 3,
            },
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }
}

impl From<fadpnet_core::Error> for HarnessError {
    fn from(e: fadpnet_core::Error) -> Self {
        Self::Model(e)
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
