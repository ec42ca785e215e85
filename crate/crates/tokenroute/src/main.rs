use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tokenroute::cli::Cli::parse();
    match tokenroute::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
