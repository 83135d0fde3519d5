//! Command-line front end: batch simulation, the live service and ledger
//! replay.

pub mod serve;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use nin_dsm_core::engine::{simulate, SimError};
use nin_dsm_core::protocol::read_ledger;
use nin_dsm_core::scenario::Scenario;
use nin_dsm_core::sm::replay;
use nin_dsm_core::{InvariantBreach, LedgerError, ScenarioError};

#[derive(Debug, Parser)]
#[command(name = "nin-dsm", version, about = "Dynamic spectrum management simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario to completion and write ledger, metrics and snapshot.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop at this simulated time (ms) instead of at END.
        #[arg(long)]
        until: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scenario paced to the wall clock behind an HTTP API.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        /// Optional TCP listener for external controllers (newline JSON).
        #[arg(long)]
        wire: Option<String>,
    },
    /// Rebuild the manager's snapshot from a ledger file.
    Replay {
        #[arg(long)]
        ledger: PathBuf,
    },
}

/// Process exit status for an error.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let scenario = cause.downcast_ref::<ScenarioError>().or(match cause.downcast_ref::<SimError>() {
            Some(SimError::Scenario(e)) => Some(e),
            _ => None,
        });
        if let Some(e) = scenario {
            return if matches!(e, ScenarioError::Io(_)) { 1 } else { 2 };
        }
        if cause.is::<InvariantBreach>() || matches!(cause.downcast_ref::<SimError>(), Some(SimError::Breach(_))) {
            return 3;
        }
        if let Some(LedgerError::Corrupt { .. }) = cause.downcast_ref::<LedgerError>() {
            return 4;
        }
    }
    1
}

pub fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    Scenario::from_path(path).with_context(|| format!("loading scenario {}", path.display()))
}

pub fn run_sim(scenario: &Path, seed: Option<u64>, until: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let scenario = load_scenario(scenario)?;
    let (engine, output) = simulate(scenario, seed, until)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    output.write_to(out).with_context(|| format!("writing results to {}", out.display()))?;
    let stats = engine.stats();
    eprintln!(
        "simulated {} ms: {} ledger events, {} engine events, {} relocations",
        engine.now(),
        engine.ledger().len(),
        stats.events_processed,
        stats.relocations
    );
    Ok(())
}

/// Returns the snapshot as pretty JSON.
pub fn run_replay(ledger: &Path) -> anyhow::Result<String> {
    let file = fs::File::open(ledger).with_context(|| format!("opening {}", ledger.display()))?;
    let events = read_ledger(BufReader::new(file)).with_context(|| format!("reading {}", ledger.display()))?;
    let state = replay(&events).context("replaying ledger")?;
    Ok(serde_json::to_string_pretty(&state.to_json())?)
}
