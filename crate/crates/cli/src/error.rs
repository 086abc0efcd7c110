use thiserror::Error;

/// Every failure the binary reports. The exit status follows the variant.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or paths: exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Failures while running the command: exit status 1.
    #[error(transparent)]
    Run(#[from] mprnet::Error),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) | CliError::Io { .. } => 1,
        }
    }
}
