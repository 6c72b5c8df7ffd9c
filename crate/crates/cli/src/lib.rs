//! File formats, pipeline orchestration and the `maskprune` command line.

pub mod artifacts;
pub mod atomic;
pub mod commands;
pub mod config;
pub mod error;
pub mod latency;
pub mod pipeline;
pub mod tensor_file;

use std::ffi::OsString;

use clap::Parser;

pub use error::{CliError, CliResult, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_INTERNAL, EXIT_OK};

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match commands::execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
