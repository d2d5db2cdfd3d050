use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pstrat::commands;
use pstrat::config::{Overrides, RunConfig};
use pstrat::exit_code;

/// Bayesian principal stratification for one-sided noncompliance with a
/// primary and a secondary outcome.
#[derive(Parser)]
#[command(name = "pstrat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV with columns z, d, y1 and optionally y2.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Master seed (required here or in the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model variant; repeat or comma-separate for several.
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<String>,
    /// Simulation scenario (I to VII); repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    scenario: Vec<String>,
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// Iterations per chain, burn-in included.
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    burnin: Option<usize>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with status 3 when a convergence warning is raised.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model variants and write posterior summaries.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Write every kept draw to draws_<variant>.csv.
        #[arg(long)]
        dump_draws: bool,
        /// Write kernel density grids of the estimands.
        #[arg(long)]
        kde: bool,
    },
    /// Posterior predictive checks (PPPV, SPPV, modified SPPV).
    Ppc {
        #[command(flatten)]
        common: Common,
        /// Reuse draw dumps from this directory instead of fitting.
        #[arg(long)]
        draws: Option<PathBuf>,
        /// Replicates per parameter draw.
        #[arg(long)]
        k: Option<usize>,
        /// Posterior draws for the modified SPPV.
        #[arg(long)]
        j: Option<usize>,
    },
    /// Generate scenario datasets and compare the variants on them.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Only write the generated datasets.
        #[arg(long)]
        emit_data: bool,
        /// Datasets per scenario for a repeated-sampling study.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Recompute summary tables from draw dumps.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// A draws_<variant>.csv file or a directory holding several.
        #[arg(long)]
        draws: PathBuf,
    },
    /// Grid posterior against Gibbs on the seeded benchmark dataset.
    #[command(hide = true)]
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        input: c.input.clone(),
        out: c.out.clone(),
        variants: c.variant.clone(),
        scenarios: c.scenario.clone(),
        chains: c.chains,
        iterations: c.iters,
        burnin: c.burnin,
        threads: c.threads,
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Fit { common, dump_draws, kde } => {
            let mut cfg = load(&common)?;
            cfg.report.dump_draws |= dump_draws;
            cfg.report.kde |= kde;
            commands::cmd_fit(cfg, common.strict)
        }
        Command::Ppc { common, draws, k, j } => {
            let mut cfg = load(&common)?;
            if let Some(k) = k {
                cfg.ppc.replicates = k;
            }
            if let Some(j) = j {
                cfg.ppc.draws = j;
            }
            commands::cmd_ppc(cfg, draws.as_deref(), common.strict)
        }
        Command::Simulate { common, emit_data, replications } => {
            let mut cfg = load(&common)?;
            cfg.simulate.emit_data |= emit_data;
            if let Some(r) = replications {
                cfg.simulate.replications = r;
            }
            commands::cmd_simulate(cfg, common.strict)
        }
        Command::Summarize { common, draws } => commands::cmd_summarize(&load(&common)?, &draws, common.strict),
        Command::Oracle { common } => commands::cmd_oracle(&load(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
