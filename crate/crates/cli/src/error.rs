use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config, or a missing input file.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] pi2i_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(pi2i_core::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}
