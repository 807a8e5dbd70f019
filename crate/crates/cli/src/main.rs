mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use bunching::dgp::McEstimator;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bunching", version, about = "Inference for bunching designs")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for result files.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Microdata CSV with columns y, x1..xd, t.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Histogram CSV of (bin_center, share).
    #[arg(long, global = true)]
    histogram: Option<PathBuf>,
    /// Sample size behind the histogram.
    #[arg(long, global = true)]
    n_obs: Option<usize>,
    /// Hypothesised parameter, comma separated for several components.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Option<Vec<f64>>,
    /// Explicit grid, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    grid: Option<Vec<f64>>,
    /// Sieve dimension.
    #[arg(long, global = true)]
    kappa: Option<usize>,
    /// Series order.
    #[arg(long, global = true)]
    ell: Option<usize>,
    /// Test level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Bias bound for the critical value.
    #[arg(long, global = true)]
    bias_bound: Option<f64>,
    /// Polynomial degree of the binned estimator.
    #[arg(long, global = true)]
    degree: Option<usize>,
    /// Simulated sample size.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Monte Carlo replications.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Worker threads for parallel commands.
    #[arg(long, global = true, env = "BUNCHING_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a sample from the simulation design.
    Simulate,
    /// Bias-aware test of a single hypothesised parameter.
    GpsTest,
    /// Confidence set by inverting the test over the grid.
    GpsCi,
    /// Joint test over several weight functions.
    Wald,
    /// Envelope bounds and the moment-inequality test over the grid.
    PartialId,
    /// Binned polynomial estimator with proportional adjustment.
    Pe,
    /// Smoothness constants and the implied bias bound.
    Calibrate,
    /// Monte Carlo rejection rates over the grid.
    Power,
}

impl Cli {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.output {
            cfg.output = Some(v.clone());
        }
        if let Some(v) = &self.data {
            cfg.data.microdata = Some(v.clone());
            cfg.data.histogram = None;
        }
        if let Some(v) = &self.histogram {
            cfg.data.histogram = Some(v.clone());
            cfg.data.microdata = None;
        }
        if let Some(v) = self.n_obs {
            cfg.data.n_obs = Some(v);
        }
        if let Some(v) = &self.theta {
            cfg.grid.theta = v.clone();
        }
        if let Some(v) = &self.grid {
            cfg.grid.points = v.clone();
        }
        if let Some(v) = self.kappa {
            cfg.test.kappa = v;
            cfg.partial_id.config.kappa = v;
        }
        if let Some(v) = self.ell {
            cfg.test.ell = v;
            cfg.partial_id.config.ell = v;
        }
        if let Some(v) = self.alpha {
            cfg.test.alpha = v;
            cfg.partial_id.config.alpha = v;
            cfg.pe.alpha = v;
        }
        if let Some(v) = self.bias_bound {
            cfg.test.bias_bound = v;
        }
        if let Some(v) = self.degree {
            cfg.pe.options.degree = v;
        }
        if let Some(v) = self.n {
            cfg.dgp.n = v;
        }
        if let Some(v) = self.reps {
            cfg.power.reps = v;
        }
        cfg.dgp.seed = cfg.seed;
        match &mut cfg.power.estimator {
            McEstimator::Gps { config } | McEstimator::Wald { config, .. } => {
                config.kappa = self.kappa.unwrap_or(config.kappa);
                config.ell = self.ell.unwrap_or(config.ell);
                config.alpha = self.alpha.unwrap_or(config.alpha);
                config.bias_bound = self.bias_bound.unwrap_or(config.bias_bound);
            }
            McEstimator::Pe { options, alpha, .. } => {
                options.degree = self.degree.unwrap_or(options.degree);
                *alpha = self.alpha.unwrap_or(*alpha);
            }
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cli.apply(&mut cfg);
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {w} workers: {e}")))?;
    }
    commands::execute(cli.command, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = format!("Configuration keys and defaults (TOML):\n\n{}", RunConfig::documented_defaults());
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
