//! Command-line front end: model and matrix file formats plus one function
//! per subcommand. `main.rs` only parses arguments and maps errors to exit
//! codes (1 usage, 2 data or validation, 3 numerical).

pub mod commands;
pub mod error;
pub mod format;

use std::io::Write;

use clap::Parser;

pub use commands::Cli;
pub use error::{CliError, CliResult};

/// Parses `args` (including the program name) and runs the subcommand,
/// writing primary output that has no `--out` target to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    commands::dispatch(cli, stdout)
}
