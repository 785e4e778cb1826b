mod args;
mod commands;
mod io;
mod mock;

use std::process::ExitCode;

use clap::Parser;
use evidence_core::Error;

use args::{Cli, Command};

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config { .. } => 1,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> evidence_core::Result<()> {
    let cfg = commands::load_config(&cli)?;
    match &cli.command {
        Command::Parse(a) => commands::parse(cfg, a),
        Command::Reward(a) => commands::reward(cfg, a),
        Command::Score(a) => commands::score(cfg, a),
        Command::Elect(a) => commands::elect(cfg, a),
        Command::Run(a) => commands::run_cmd(cfg, a),
        Command::TrainToy(a) => commands::train_toy_cmd(cfg, a),
        Command::Metrics(a) => commands::metrics(cfg, a),
        Command::MockProvider(a) => mock::provider(cfg.seed, a),
        Command::MockReferee(a) => mock::referee(a),
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe is not a failure of ours.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
