//! Command-line runner: reads a TOML experiment config, calls the `lockin-core` operations and writes
//! JSON reports, CSV tables and a manifest into an output directory.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{execute, Outcome};
pub use config::ExperimentConfig;

#[derive(Debug, Clone, Parser)]
#[command(name = "lockin", version, about = "Lock-in probability laboratory for stochastic approximation")]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte Carlo worker threads; 0 uses every core. Never changes results.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, env = "LOCKIN_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Last simulated index for lock-in runs.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Monte Carlo trial count.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Every experiment the config describes.
    Run {
        /// Config path, same as `--config`.
        path: Option<PathBuf>,
    },
    /// Decompose one SA path against the ODE and check the identity residual.
    VerifyDecomposition {
        /// Replaces the config noise, e.g. `zero` or `laplace:0.1`.
        #[arg(long)]
        noise: Option<String>,
    },
    /// Lock-in lower bound for the config's parameters.
    EvalBound(BoundOverrides),
    /// Monte Carlo lock-in frequencies compared with the bound.
    McLockin,
    /// Empirical tails of weighted noise sums against the concentration bound.
    ConcCheck {
        /// Comma-separated noises such as `laplace:1,uniform:1`.
        #[arg(long, value_delimiter = ',')]
        noise: Vec<String>,
    },
    /// Directly summed tail series against their order envelopes.
    OrderStudy {
        #[arg(long, value_delimiter = ',')]
        mu: Vec<f64>,
        #[arg(long = "C")]
        c: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        n0: Vec<usize>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct BoundOverrides {
    #[arg(long = "C1")]
    pub c1: Option<f64>,
    #[arg(long = "C2")]
    pub c2: Option<f64>,
    #[arg(long = "K")]
    pub k: Option<f64>,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}
