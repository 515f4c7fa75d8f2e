//! Thin experiment driver over the library: five subcommands, each taking a
//! config file and an output directory. Exit status is 0 iff every run-level
//! assertion of the subcommand passed; artifacts are flushed either way.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radargate::cli::{
    cmd_complexity, cmd_cone_demo, cmd_gradcheck, cmd_scale_sweep, cmd_train, CmdOutcome,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "radargate",
    about = "Gating experiments over frozen low-rank adapter banks"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key-value config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV/SVG/JSON artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference validation of the analytic gradients.
    Gradcheck(Common),
    /// Training runs for every listed (seed, mode) pair.
    Train(Common),
    /// Module-count scaling sweep on routing-mix tasks.
    ScaleSweep(Common),
    /// Cone-escape demonstration with CSV + SVG output.
    ConeDemo(Common),
    /// Analytic vs instrumented complexity sweep.
    Complexity(Common),
}

fn load(common: &Common) -> radargate::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> radargate::Result<CmdOutcome> {
    let args = Args::parse();
    match &args.command {
        Command::Gradcheck(c) => cmd_gradcheck(&load(c)?, &c.out),
        Command::Train(c) => cmd_train(&load(c)?, &c.out),
        Command::ScaleSweep(c) => cmd_scale_sweep(&load(c)?, &c.out),
        Command::ConeDemo(c) => cmd_cone_demo(&load(c)?, &c.out),
        Command::Complexity(c) => cmd_complexity(&load(c)?, &c.out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(outcome) => {
            println!("{}", outcome.summary.trim_end());
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
