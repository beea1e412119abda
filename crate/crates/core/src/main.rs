use std::process::ExitCode;

use clap::Parser;
use ife::cli::{error_record, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::from(err.exit_status())
        }
    }
}
