use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mgdm::harness::{self, ExperimentConfig};
use mgdm::sampler::ConditionalBackend;
use mgdm::Result;

#[derive(Parser)]
#[command(
    name = "mgdm",
    version,
    about = "Mixture-guided diffusion posterior sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run n_runs independent samples and write runs.csv and summary.json.
    Run(Common),
    /// Run every point of the configured R / G / index sweep and write sweep.csv.
    Sweep(Common),
    /// Write the exact output moments (exact backend only) to oracle.json.
    Oracle(Common),
    /// Compare empirical output moments against the oracle via z-scores.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Report the discrepancy of a VI backend instead of refusing it.
        #[arg(long)]
        measure_vi_error: bool,
    },
    /// Built-in 1-D run (K = 10, R = 1, 10 runs).
    Smoke(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config, or a summary.json written by a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the conditional sampler.
    #[arg(long, value_enum)]
    backend: Option<Backend>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Exact,
    Vi,
    ViMh,
}

/// MH steps used when `--backend vi-mh` is given on the command line.
const CLI_MH_STEPS: usize = 10;

impl Common {
    fn load(&self, fallback: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut config = match (&self.config, fallback) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => {
                return Err(mgdm::Error::InvalidParameter("--config is required".into()));
            }
        };
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        if let Some(backend) = self.backend {
            config = config.with_backend(match backend {
                Backend::Exact => ConditionalBackend::Exact,
                Backend::Vi => ConditionalBackend::Vi,
                Backend::ViMh => ConditionalBackend::ViMh {
                    steps: CLI_MH_STEPS,
                },
            });
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(c) => {
            let config = c.load(None)?;
            let dir = harness::run_experiment(&config, c.out.as_deref(), c.jobs)?;
            println!("wrote {}", dir.display());
        }
        Command::Smoke(c) => {
            let config = c.load(Some(ExperimentConfig::smoke()))?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("mgdm-smoke"));
            let dir = harness::run_experiment(&config, Some(&out), c.jobs)?;
            println!("wrote {}", dir.display());
        }
        Command::Sweep(c) => {
            let config = c.load(None)?;
            let dir = harness::write_sweep(&config, c.out.as_deref(), c.jobs)?;
            println!("wrote {}", dir.display());
        }
        Command::Oracle(c) => {
            let config = c.load(None)?;
            let dir = harness::write_oracle(&config, c.out.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::Compare {
            common,
            measure_vi_error,
        } => {
            let config = common.load(None)?;
            let (dir, report) = harness::write_compare(
                &config,
                measure_vi_error,
                common.out.as_deref(),
                common.jobs,
            )?;
            println!("{}", harness::describe_compare(&report));
            println!("wrote {}", dir.display());
            if report.pass == Some(false) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MGDM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
