use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cimnet::cli::Cli::parse();
    match cimnet::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
