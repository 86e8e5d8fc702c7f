use std::process::ExitCode;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// CLI failures, each tied to a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 4.
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    /// Classifies a core error raised while reading input files.
    pub fn data(e: pgae_core::Error) -> Self {
        CliError::Data(e.to_string())
    }

    /// Classifies a core error raised while computing.
    pub fn runtime(e: pgae_core::Error) -> Self {
        use pgae_core::Error as E;
        match e {
            E::Parse(_) | E::TraceSchema { .. } | E::TraceIncomplete(_) | E::Csv(_) | E::EmptyStratum(_) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}
