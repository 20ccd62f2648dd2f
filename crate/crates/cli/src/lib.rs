//! Command-line experiments and the labelling service.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod server;
pub mod setup;

use std::ffi::OsString;

use clap::{CommandFactory, Parser};

use crate::args::Cli;
use crate::error::CliError;

/// Parses `args` (config file included) and runs the command, returning the
/// process exit code. Errors go to stderr as one JSON line.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let args = match config::config_path(&args) {
        Some(path) => match config::load(path.as_ref()) {
            Ok(settings) => {
                let subs: Vec<String> = Cli::command()
                    .get_subcommands()
                    .map(|c| c.get_name().to_owned())
                    .collect();
                config::merge(args, &settings, &subs)
            }
            Err(e) => return fail(&e),
        },
        None => args,
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", e.render());
            return fail(&CliError::usage(e.kind().to_string()));
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> i32 {
    eprintln!("{}", e.to_json());
    e.exit_code()
}
