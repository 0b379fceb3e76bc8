//! Command-line runner for the selective-shield simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use selective_shield::config::ExperimentConfig;
use selective_shield::experiment;

#[derive(Parser, Debug)]
#[command(
    name = "selective-shield",
    version,
    about = "Simulate federated learning with Fisher-selected encryption, personalization and DP noise",
    after_help = config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the protocol and write rounds.csv and privacy.csv.
    Run(Common),
    /// Run once per (tau, rho) cell and write the final rounds to sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Comma-separated consensus ratios.
        #[arg(long, value_delimiter = ',')]
        rhos: Vec<f64>,
    },
    /// Run with noise off (unless attack_noise is set) and attack every upload.
    Attack(Common),
    /// Write every client's Fisher scores of the initial model.
    DumpFisher(Common),
}

fn config_help() -> String {
    format!("Config keys and defaults:\n{}", ExperimentConfig::reference())
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let summary = experiment::run(&cfg, &common.out)?;
            println!(
                "{} rounds, final accuracy {:.4}, results in {}",
                summary.reports.len(),
                summary.final_accuracy(),
                common.out.display()
            );
        }
        Command::Sweep { common, taus, rhos } => {
            let cfg = load(&common)?;
            let cells = experiment::sweep(&cfg, &taus, &rhos, &common.out)?;
            println!("{} cells, results in {}", cells.len(), common.out.display());
        }
        Command::Attack(common) => {
            let cfg = load(&common)?;
            let attacks = experiment::attack(&cfg, &common.out)?;
            let n = attacks.len().max(1) as f64;
            let le: f64 = attacks.iter().map(|a| a.le_acc).sum::<f64>() / n;
            let ln: f64 = attacks.iter().map(|a| a.ln_acc).sum::<f64>() / n;
            println!("mean le_acc {le:.4}, ln_acc {ln:.4}, results in {}", common.out.display());
        }
        Command::DumpFisher(common) => {
            let cfg = load(&common)?;
            let paths = experiment::dump_fisher(&cfg, &common.out)?;
            println!("{} score files in {}", paths.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
