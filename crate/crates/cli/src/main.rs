//! `banet`: count, train, evaluate and analyse attention networks.

mod args;
mod commands;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::Cli;
use commands::CliError;

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("BANET_THREADS") {
        // matrixmultiply reads this once, on its first threaded call.
        std::env::set_var("MATMUL_NUM_THREADS", n);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
