use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] damsl::Error),

    #[error("{failed} benchmark cell(s) failed")]
    Cells { failed: usize, code: i32 },
}

impl CliError {
    /// 1 usage/config, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(e) => core_exit_code(e),
            CliError::Cells { code, .. } => *code,
        }
    }
}

pub fn core_exit_code(e: &damsl::Error) -> i32 {
    match e {
        damsl::Error::Config(_) => 1,
        damsl::Error::Numeric { .. } | damsl::Error::StaleTape => 3,
        _ => 2,
    }
}

pub type CliResult<T> = Result<T, CliError>;
