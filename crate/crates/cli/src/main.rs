//! `mpi`: fit, render, evaluate and export multiplane images.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Stable identifier for an error chain, taken from the innermost toolkit
/// error when there is one.
fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<mpi_core::Error>())
        .map(|e| e.kind())
        .or_else(|| {
            err.chain()
                .find_map(|e| e.downcast_ref::<commands::FlagError>())
                .map(|_| "invalid-flag")
        })
        .unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}").replace('\n', " ").replace('"', "'");
            eprintln!("error: kind={} message=\"{message}\"", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
