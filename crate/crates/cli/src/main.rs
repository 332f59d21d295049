mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use spikecalib::Error;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidArgument(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match e.root() {
        Error::ShapeMismatch { .. } => "shape-mismatch",
        Error::InvalidArgument(_) => "usage",
        Error::Unsupported(_) => "unsupported",
        Error::Numeric(_) => "numeric",
        Error::Data(_) => "data",
        Error::Format(_) => "format",
        Error::Io { .. } => "io",
        Error::Layer { .. } => unreachable!("root skips layer wrappers"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        log::warn!("thread pool already initialised: {e}");
    }
    let result = match &cli.command {
        Command::Convert(a) => commands::convert(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::BoundCheck(a) => commands::bound_check(a),
        Command::TrainDemo(a) => commands::train_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                json!({ "error": kind(&e), "exit_code": code, "message": e.to_string() })
            );
            ExitCode::from(code)
        }
    }
}
