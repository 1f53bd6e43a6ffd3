//! `kvsim` command-line driver: trace generation, analysis, and policy
//! comparisons written as CSV or JSON tables.
//!
//! Exit codes: 0 success, 2 configuration or parameter error, 3 malformed
//! input data, 4 internal failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};

use clap::Parser;

pub use commands::execute;
pub use config::{Cli, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    /// Treats any core error as a bad parameter.
    pub fn from_param(err: kvsim_core::Error) -> Self {
        CliError::Config(err.to_string())
    }
}

impl From<kvsim_core::Error> for CliError {
    fn from(err: kvsim_core::Error) -> Self {
        use kvsim_core::Error as E;
        match err {
            E::Parameter(_) => CliError::Config(err.to_string()),
            E::Format { .. } | E::Validation(_) | E::Io { .. } => CliError::Data(err.to_string()),
            E::Shape(_) => CliError::Internal(err.to_string()),
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = catch_unwind(AssertUnwindSafe(|| {
        let cfg = RunConfig::from_cli(cli)?;
        execute(&cfg)
    }))
    .unwrap_or_else(|_| Err(CliError::Internal("command panicked".into())));
    match result {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("kvsim: {e}");
            e.exit_code()
        }
    }
}
