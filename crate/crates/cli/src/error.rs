use thiserror::Error;

/// A failure mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("pipeline failure: {0}")]
    Pipeline(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("check failed: {0}")]
    Check(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 configuration or usage, 3 I/O or unreadable input, 4 a refinery
    /// stage over its failure threshold, 5 training divergence, 1 a failed
    /// gradient check.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Check(_) => 1,
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Pipeline(_) => 4,
            Self::Divergence(_) => 5,
        }
    }
}

impl From<air_core::Error> for CliError {
    fn from(e: air_core::Error) -> Self {
        use air_core::Error as E;
        match e {
            E::Config(m) => Self::Config(m),
            E::Io { .. } | E::Format { .. } | E::Json(_) => Self::Io(e.to_string()),
            E::Training { .. } => Self::Divergence(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<air_refinery::Error> for CliError {
    fn from(e: air_refinery::Error) -> Self {
        use air_refinery::Error as E;
        match e {
            E::Config(m) => Self::Config(m),
            _ => Self::Io(e.to_string()),
        }
    }
}
