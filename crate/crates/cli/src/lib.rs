//! Command-line orchestration: training runs, robustness evaluation,
//! bandit selection, sweeps and self-checks, each writing a run directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod error;
pub mod manifest;

pub use commands::{Globals, LoadedConfig};
pub use error::CliError;
pub use manifest::{Manifest, RunArgs};

#[derive(Debug, Parser)]
#[command(name = "cvarppo", version, about = "CVaR-constrained PPO and Bernstein-UCB policy selection")]
pub struct Cli {
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    pub output_dir: PathBuf,
    /// Name of the run directory; derived from the command when omitted.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        alpha: Option<f64>,
        /// Keep λ at 0 (PPO baseline).
        #[arg(long)]
        ppo: bool,
    },
    /// Evaluate checkpoints under perturbations.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Repeatable; defaults to `eval.perturbations`.
        #[arg(long = "perturbation")]
        perturbations: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Select among arms with the Bernstein UCB rule.
    Bandit {
        #[command(flatten)]
        config: ConfigArg,
        /// Extra live-policy arms, appended after the configured ones.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Perturbation for the extra policy arms.
        #[arg(long = "perturbation")]
        perturbation: Option<String>,
        /// Horizon in episodes; defaults to `bandit.horizon`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the alpha sweep plus PPO, then evaluate all of them.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "perturbation")]
        perturbations: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the internal consistency checks.
    Selftest,
    /// Re-run a recorded run into `--output-dir`.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Executes the command; returns the run directory it created, if any.
pub fn run(cli: Cli) -> Result<Option<PathBuf>, CliError> {
    let g = Globals {
        seed: cli.seed,
        output_dir: cli.output_dir,
        run_id: cli.run_id,
    };
    let dir = match cli.command {
        Command::Train { config, alpha, ppo } => {
            let loaded = commands::load_config(&config.config)?;
            let args = RunArgs {
                alpha,
                freeze_lambda: ppo.then_some(true),
                ..Default::default()
            };
            commands::cmd_train(&g, &loaded, args)?
        }
        Command::Eval {
            config,
            checkpoints,
            perturbations,
            episodes,
        } => {
            let loaded = commands::load_config(&config.config)?;
            let args = RunArgs {
                perturbations,
                episodes,
                checkpoints,
                ..Default::default()
            };
            commands::cmd_eval(&g, &loaded, args)?
        }
        Command::Bandit {
            config,
            checkpoints,
            perturbation,
            episodes,
        } => {
            let loaded = commands::load_config(&config.config)?;
            let args = RunArgs {
                perturbations: perturbation.into_iter().collect(),
                episodes,
                checkpoints,
                ..Default::default()
            };
            commands::cmd_bandit(&g, &loaded, args)?
        }
        Command::Sweep {
            config,
            perturbations,
            episodes,
        } => {
            let loaded = commands::load_config(&config.config)?;
            let args = RunArgs {
                perturbations,
                episodes,
                ..Default::default()
            };
            commands::cmd_sweep(&g, &loaded, args)?
        }
        Command::Selftest => {
            commands::cmd_selftest(&g)?;
            return Ok(None);
        }
        Command::Replay { manifest } => commands::cmd_replay(&manifest, &g.output_dir)?,
    };
    Ok(Some(dir))
}
