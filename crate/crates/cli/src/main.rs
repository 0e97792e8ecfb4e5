use std::path::PathBuf;
use std::process::ExitCode;

use cace_cli::commands;
use cace_cli::config::{Overrides, RunConfig, SeMode};
use cace_cli::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cace-ipw",
    version,
    about = "IPW estimators of complier average causal effects for clustered RCTs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured estimators to a trial data file.
    Estimate(Common),
    /// Run a Monte Carlo study for the configured scenario.
    Simulate(Common),
    /// Receipt-model diagnostics: balance, density check, mean weights, overlap.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides [output].dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for simulate; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Multiply sandwich variances by the small-sample factor g.
    #[arg(long)]
    g_correction: bool,
    #[arg(long, value_enum)]
    se: Option<SeMode>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
            level: self.level,
            g_correction: self.g_correction,
            se: self.se,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<commands::Outputs, CliError> {
    match cli.command {
        Command::Estimate(c) => commands::estimate(&c.load()?),
        Command::Simulate(c) => commands::simulate(&c.load()?).map(|(o, _)| o),
        Command::Diagnose(c) => commands::diagnose(&c.load()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CACE_IPW_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{}", out.summary);
            for f in &out.files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
