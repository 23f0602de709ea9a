//! Command-line front end: config parsing and one function per subcommand.

pub mod commands;
pub mod config;

use std::fmt;

pub use commands::{run, Command};
pub use config::{parse_config, RunConfig};

/// Exit status 1 for bad input (config, data files, bundles), 2 for
/// failures while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

impl From<mmrec::Error> for CliError {
    fn from(e: mmrec::Error) -> Self {
        use mmrec::Error as E;
        match e {
            E::Config { .. }
            | E::Parse { .. }
            | E::UnknownItem(_)
            | E::OutOfVocabulary { .. }
            | E::Checkpoint(_)
            | E::MissingGroup(_)
            | E::DimMismatch { .. }
            | E::InvalidArgument(_) => CliError::Validation(e.to_string()),
            E::Shape { .. } | E::NonScalar(..) | E::NonFiniteGradient(_) | E::Io { .. } => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}
