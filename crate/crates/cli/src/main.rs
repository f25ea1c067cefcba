use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod error;
mod io;

use args::{Cli, Command};
use error::{CliError, Result};

fn run(cli: &Cli) -> Result<u8> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a, cli.format),
        Command::Calibrate(a) => commands::calibrate(a, cli.format),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a, cli.format),
        Command::Guarantee(a) => commands::guarantee(a, cli.format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
