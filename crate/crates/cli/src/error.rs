use std::path::PathBuf;

use crate::config::ConfigError;

/// Everything a subcommand can fail with, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Artifact { path: PathBuf, source: rgr::Error },

    #[error(transparent)]
    Core(#[from] rgr::Error),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_FAILURE: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_INVALID,
            CliError::Artifact { source, .. } | CliError::Core(source) => core_exit_code(source),
        }
    }
}

fn core_exit_code(e: &rgr::Error) -> u8 {
    use rgr::Error::*;
    match e {
        InvalidArgument(_) | InvalidData(_) | DegenerateInput(_) => EXIT_INVALID,
        Infeasible(_) | InfeasibleExtension { .. } => EXIT_INFEASIBLE,
        InvalidGrid { .. } | NumericalFailure(_) | IllConditioned(_) | Format(_) | Io(_) => EXIT_FAILURE,
    }
}
