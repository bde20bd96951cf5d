use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] clicktomo::Error),

    /// Outputs were written but a solve or fit did not succeed.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use clicktomo::Error as E;
        match self {
            CliError::Numerical(_) => 2,
            CliError::Core(
                E::Conditioning { .. }
                | E::DegenerateMask { .. }
                | E::ModelMismatch { .. }
                | E::UndefinedMoment
                | E::Infeasible(_)
                | E::Underdetermined(_),
            ) => 2,
            _ => 1,
        }
    }
}
