mod args;
mod commands;
mod error;
mod runconfig;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use log::LevelFilter;

use args::{Cli, Command};

fn init_logging() {
    let level = match std::env::var("IIN_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        Ok("info") | Err(_) => LevelFilter::Info,
        Ok(other) => {
            eprintln!("warning: IIN_LOG={other:?} is not one of quiet, info, debug; using info");
            LevelFilter::Info
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, false),
        Command::TrainUnsup(a) => commands::train(a, true),
        Command::EstimateDims(a) => commands::estimate_dims(a),
        Command::Swap(a) => commands::swap(a),
        Command::Interp(a) => commands::interp(a),
        Command::AttrVec(a) => commands::attr_vec(a),
        Command::Sample(a) => commands::sample_cmd(a),
        Command::Respond(a) => commands::respond(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Roundtrip(a) => commands::roundtrip(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iin: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
