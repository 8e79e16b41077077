use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match mlte::cli::run(mlte::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
