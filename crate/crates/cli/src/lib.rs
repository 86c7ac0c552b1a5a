//! Command-line surface for world generation, training, annotation
//! simulation, evaluation and reporting.

pub mod commands;
pub mod config;

use std::path::PathBuf;

pub use commands::{run, Cli};
pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cocoon::Error),

    #[error("invalid configuration file {}: {detail}", path.display())]
    ConfigFile { path: PathBuf, detail: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cocoon::Error as E;
        match self {
            CliError::ConfigFile { .. } | CliError::Usage(_) => EXIT_VALIDATION,
            CliError::Core(e) => match e {
                E::NonFinite { .. } | E::Diverged { .. } | E::Degenerate(_) => EXIT_NUMERIC,
                E::Io(_) | E::Corrupt { .. } => EXIT_IO,
                E::Shape { .. }
                | E::Contract(_)
                | E::Config(_)
                | E::UndefinedMetric(_)
                | E::InsufficientData(_)
                | E::HashMismatch { .. } => EXIT_VALIDATION,
            },
        }
    }
}
