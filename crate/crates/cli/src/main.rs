use std::process::ExitCode;

use clap::Parser;
use mhct_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match mhct_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
