//! `overdisp` command-line tool.

mod args;
mod commands;
mod error;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => commands::fit_command(a),
        Command::Dispersion(a) => commands::dispersion_command(a),
        Command::Simulate(a) => commands::simulate_command(a),
        Command::Generate(a) => commands::generate_command(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
