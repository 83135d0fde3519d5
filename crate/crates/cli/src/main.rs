use std::process::ExitCode;

use clap::Parser;
use nin_dsm::{exit_code, run_replay, run_sim, serve, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim { scenario, seed, until, out } => run_sim(&scenario, seed, until, &out),
        Command::Serve { scenario, listen, wire } => serve::run_blocking(&scenario, &listen, wire.as_deref()),
        Command::Replay { ledger } => run_replay(&ledger).map(|snapshot| println!("{snapshot}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
