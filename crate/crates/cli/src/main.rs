// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use frp_core::harness::{self, HarnessError, RunOptions, ScenarioKind};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Select,
    CcSim,
    RecoverDemo,
    Optd,
    Gate,
    Full,
}

impl From<Command> for ScenarioKind {
    fn from(c: Command) -> Self {
        match c {
            Command::Select => ScenarioKind::Select,
            Command::CcSim => ScenarioKind::CcSim,
            Command::RecoverDemo => ScenarioKind::RecoverDemo,
            Command::Optd => ScenarioKind::Optd,
            Command::Gate => ScenarioKind::Gate,
            Command::Full => ScenarioKind::Full,
        }
    }
}

/// Run a kernel scenario and write metrics.csv and summary.json.
#[derive(Debug, Parser)]
#[command(name = "frp-kernel", version)]
struct Cli {
    /// Module driver to run; overrides the kind in the config file.
    #[arg(value_enum)]
    command: Command,
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check the config and referenced files, then exit.
    #[arg(long)]
    validate_only: bool,
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let opts = RunOptions { kind: Some(cli.command.into()), seed: cli.seed, out: cli.out.clone() };
    let prepared = harness::prepare(&cli.config, &opts)?;
    if cli.validate_only {
        println!("{}", serde_json::json!({"valid": true, "scenario": prepared.kind.name(), "seed": prepared.seed}));
        return Ok(());
    }
    let report = harness::run_prepared(&prepared)?;
    let text = serde_json::to_string_pretty(&report.summary).map_err(HarnessError::io)?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
