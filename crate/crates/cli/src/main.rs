use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "ultradp", version, about = "Graph pre-training with task and position prompts")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides `pretrain.seed` (pretrain) or `eval.seeds` (eval).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the reachability cache and anchor set.
    Precompute {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pre-train and write a checkpoint with its training log.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the transferability test for every configured shot and seed.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report link-prediction AUC on the held-out edges.
        #[arg(long)]
        link_probe: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Precompute { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", commands::precompute(&cfg)?.display());
        }
        Command::Pretrain { config } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.pretrain.seed = s;
            }
            println!("{}", commands::pretrain_cmd(&cfg)?.display());
        }
        Command::Eval { config, checkpoint, link_probe } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.eval.seeds = vec![s];
            }
            let dir = commands::eval_cmd(&cfg, &checkpoint, &commands::EvalOptions { link_probe })?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UDP_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
