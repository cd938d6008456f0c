use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    probit_cli::execute(probit_cli::Cli::parse())
}
