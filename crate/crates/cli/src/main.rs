//! `nosd`: robust inference, tuning selection, Monte-Carlo studies and test-plan
//! design for one-shot devices under progressive-stress accelerated life tests.
//!
//! Exit codes: 0 success, 1 computational failure, 2 configuration error.

mod commands;
mod config;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nosd_core::asymptotics::KWeighting;
use nosd_core::tuning::TuningMethod;

use crate::commands::RunError;
use crate::config::{load_config, Command, ConfigError, Format, RunConfig};

#[derive(Parser)]
#[command(name = "nosd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Option<Sub>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (written atomically); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Monte-Carlo replications (simulate).
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Per-group scaling of K: literal or proportional.
    #[arg(long, global = true)]
    k_weighting: Option<KWeighting>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// MLE and minimum-EPD fits with Wald and bootstrap summaries.
    Fit,
    /// Monte-Carlo bias/RMSE study under contamination.
    Simulate,
    /// Data-driven tuning selection over a grid.
    Tune {
        #[arg(long)]
        method: Option<TuningMethod>,
    },
    /// Constrained particle-swarm search for a test plan.
    Design,
    /// Goodness-of-fit test with a parametric-bootstrap p-value.
    Gof,
    /// Asymptotic J, K and sandwich covariance.
    Cov,
    /// Influence function over the outlier lattice.
    Influence,
}

impl Sub {
    fn command(self) -> Command {
        match self {
            Sub::Fit => Command::Fit,
            Sub::Simulate => Command::Simulate,
            Sub::Tune { .. } => Command::Tune,
            Sub::Design => Command::Design,
            Sub::Gof => Command::Gof,
            Sub::Cov => Command::Cov,
            Sub::Influence => Command::Influence,
        }
    }
}

fn resolve(cli: &Cli) -> Result<(Command, RunConfig), ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let cmd = match (cli.command.map(Sub::command), cfg.command) {
        (Some(c), Some(k)) if c != k => {
            return Err(ConfigError(format!("command: config says {k:?} but the subcommand is {c}")));
        }
        (Some(c), _) | (None, Some(c)) => c,
        (None, None) => return Err(ConfigError("command: no subcommand given and none in the config".into())),
    };
    if let Some(Sub::Tune { method: Some(m) }) = cli.command {
        cfg.method = Some(m);
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.output_path = cli.out.clone();
    }
    if cli.format.is_some() {
        cfg.format = cli.format;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cli.reps.is_some() {
        cfg.reps = cli.reps;
    }
    if cli.k_weighting.is_some() {
        cfg.k_weighting = cli.k_weighting;
    }
    cfg.validate()?;
    Ok((cmd, cfg))
}

fn execute(cli: &Cli) -> Result<(), RunError> {
    let (cmd, cfg) = resolve(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Config(ConfigError(format!("threads: {e}"))))?;
    }
    let out = commands::run(cmd, &cfg)?;
    let write_err = |e: anyhow::Error| RunError::Compute(format!("{e:#}"));
    for (path, text) in &out.side_files {
        output::write_atomic(path, text).map_err(write_err)?;
    }
    match &cfg.output_path {
        Some(p) => output::write_atomic(p, &out.primary).map_err(write_err)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(out.primary.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| RunError::Compute(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(RunError::Compute(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
