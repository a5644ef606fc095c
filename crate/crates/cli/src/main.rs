use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    mekf_cli::run(mekf_cli::Cli::parse())
}
