use std::process::ExitCode;

use clap::Parser;
use planeval_cli::{error_category, run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", error_category(&e));
            ExitCode::FAILURE
        }
    }
}
