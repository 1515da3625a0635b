use handles_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 2 for configuration and I/O problems, 1 for pipeline failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Io { .. }
                | CoreError::Image { .. }
                | CoreError::MalformedHeader(_)
                | CoreError::Truncated { .. }
                | CoreError::BadMagic { .. }
                | CoreError::VersionMismatch(_) => 2,
                _ => 1,
            },
        }
    }
}
