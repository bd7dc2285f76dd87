use std::path::PathBuf;

use p4gs_core::Error;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("output directory {} is in use by another command (remove {} if stale)", .0.display(), .1.display())]
    Locked(PathBuf, PathBuf),
}

impl CliError {
    /// Process exit code: 2 for configuration and usage problems, 4 for
    /// numerical divergence, 3 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.root() {
                Error::Config(_) => 2,
                Error::Diverged { .. } => 4,
                _ => 3,
            },
            CliError::Locked(..) => 3,
        }
    }
}
