use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fscl_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 I/O or malformed input file, 2 configuration, 3 numeric failure, 4 strict assumption
    /// check.
    pub fn exit_code(&self) -> ExitCode {
        let code = match self {
            CliError::Io { .. } | CliError::Data(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::AssumptionViolated { .. } => 4,
                CoreError::InvalidSpec(_)
                | CoreError::InvalidTemperature(_)
                | CoreError::DimensionTooSmall { .. } => 2,
                _ => 3,
            },
        };
        ExitCode::from(code)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
