use std::process::ExitCode;

use clap::Parser;
use tnprice_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match tnprice_cli::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
