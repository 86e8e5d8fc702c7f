//! Command-line front end: `design`, `simulate` and `estimate`.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgae_core::EstimateMethod;

use crate::commands::EstimateRequest;
use crate::config::RunConfig;
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pgae", version, about = "Prediction-guided active experimentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the optimal design and its variance bound.
    Design(Common),
    /// Run the replication study and write metrics.
    Simulate(Common),
    /// Re-estimate the mean from a saved trace.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Trace CSV to estimate from.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Adaptive)]
        method: Method,
        /// Estimator options JSON, e.g. a saved `*.options.json`.
        #[arg(long)]
        options: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed and `PGAE_SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config and `PGAE_OUTPUT_DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides the config's replication count.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Adaptive,
    Crossfit,
    Naive,
    IpwOnly,
    Ppi,
}

impl From<Method> for EstimateMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Adaptive => EstimateMethod::Adaptive,
            Method::Crossfit => EstimateMethod::Crossfit,
            Method::Naive => EstimateMethod::Naive,
            Method::IpwOnly => EstimateMethod::IpwOnly,
            Method::Ppi => EstimateMethod::Ppi,
        }
    }
}

/// Loads the config and layers environment and flag overrides on top.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(reps) = common.reps {
        cfg.n_reps = reps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_pool<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match jobs {
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(f),
        None => f(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Design(common) => {
            let cfg = load_config(&common)?;
            let (_, summary) = with_pool(common.jobs, || commands::design(&cfg))?;
            println!(
                "bound {:.6} vs naive {:.6}: efficiency ratio {:.4}",
                summary.bound, summary.naive_bound, summary.efficiency_ratio
            );
            Ok(())
        }
        Command::Simulate(common) => {
            let cfg = load_config(&common)?;
            with_pool(common.jobs, || commands::simulate(&cfg))?;
            println!("wrote {}", cfg.output_dir.join("metrics.csv").display());
            Ok(())
        }
        Command::Estimate {
            common,
            trace,
            method,
            options,
        } => {
            let cfg = load_config(&common)?;
            let req = EstimateRequest {
                trace,
                method: method.into(),
                options,
            };
            with_pool(common.jobs, || commands::estimate(&cfg, &req))?;
            Ok(())
        }
    }
}
