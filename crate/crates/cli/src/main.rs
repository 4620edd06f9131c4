mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use mixmem::Error;

use crate::args::{expand_config, Cli};

fn exit_status(category: &str) -> u8 {
    match category {
        "argument" => 2,
        "parse" => 3,
        "solver" => 4,
        _ => 5,
    }
}

fn fail(err: &Error) -> ExitCode {
    let category = err.category();
    let message = err.to_string().replace('\n', " ");
    eprintln!("error[{category}]: {message}");
    ExitCode::from(exit_status(category))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                let text = e.to_string();
                let line = text.lines().next().unwrap_or_default();
                return fail(&Error::Argument(line.trim_start_matches("error: ").to_string()));
            }
        },
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
