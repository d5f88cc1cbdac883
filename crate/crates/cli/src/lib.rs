//! Command-line front end: run configuration, the training/evaluation
//! pipeline and the `metarec` subcommands.

use std::path::{Path, PathBuf};

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] metarec_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for data and files, 4 for numerical
    /// or internal failures.
    pub fn exit_code(&self) -> u8 {
        use metarec_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Invalid(_)
                | E::Parse { .. }
                | E::Data(_)
                | E::Format(_)
                | E::Io { .. }
                | E::SequenceTooLong { .. } => 3,
                E::Numerical(_) | E::Shape { .. } | E::Backward(_) | E::Optimizer(_) => 4,
            },
        }
    }
}
