use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("acceptance check failed: {0}")]
    Acceptance(String),

    #[error("{0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] longattn_core::Error),
}

impl CliError {
    /// 0 ok, 2 config error, 3 numeric error, 4 acceptance failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(longattn_core::Error::Config(_)) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Acceptance(_) => 4,
            _ => 1,
        }
    }

    pub fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{what}: {e}"))
    }
}
