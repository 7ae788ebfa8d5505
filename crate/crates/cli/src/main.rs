use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;

/// Semi-Markov regime SEIR models: simulation, particle Gibbs and SMC²
/// fitting, forecasting and model comparison.
#[derive(Debug, Parser)]
#[command(name = "epismc", version)]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run configuration (default: $EPISMC_CONFIG, else built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset in the loader's file format.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of days.
        #[arg(long = "T")]
        t: Option<usize>,
    },
    /// Batch fit with Particle Gibbs chains.
    FitBatch {
        #[command(flatten)]
        common: Common,
        /// Dataset JSON (overrides `data` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        /// Particles in the conditional filter.
        #[arg(long)]
        particles: Option<usize>,
        /// Filter every n-th retained draw for DIC/WAIC (0 disables).
        #[arg(long)]
        criteria_thin: Option<usize>,
    },
    /// Sequential fit with SMC², streaming predictive likelihoods.
    FitSeq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Parameter particles.
        #[arg(long = "N")]
        n: Option<usize>,
        /// Particles per inner filter.
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        t0: Option<usize>,
        #[arg(long)]
        sweeps: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predictive intervals from a fitted run.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Output directory of fit-batch or fit-seq.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        aggregation: Option<AggregationArg>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Model comparison table from two or more runs.
    Compare {
        /// Run directories, each `DIR` or `LABEL=DIR[,DIR...]`. Runs given the
        /// same label (say a batch and a sequential fit) share one model row.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Which predictive-likelihood estimate of SMC² runs to compare.
        #[arg(long, value_enum, default_value_t = EstimatorArg::Filter)]
        estimator: EstimatorArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence summaries and trace extracts of a batch run.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Daily,
    Weekly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    Filter,
    Prediction,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<epismc_core::Error>() {
            return if core.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION };
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
