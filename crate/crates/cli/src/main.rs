//! `asf`: generate synthetic data, train and evaluate the activity-specific
//! feature head, count parameters and export attention maps.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::exit::{Failure, WithCode, CONFIG};

#[derive(Parser)]
#[command(name = "asf", version, about)]
struct Cli {
    /// Config file of `key = value` lines. Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads. `1` gives bitwise-reproducible single-context runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData,
    /// Run both training phases and write checkpoint, loss curve and mask.
    Train,
    /// Multi-view evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `train`, `test` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also score each sampling rate on its own.
        #[arg(long)]
        compare_rates: bool,
    },
    /// Print learnable-parameter counts.
    Params {
        /// Print the published-table sweeps instead of the run config.
        #[arg(long = "paper-table")]
        published: bool,
    },
    /// Export per-activity attention maps, PGM frames and boxes for one video.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        video: usize,
        /// Comma-separated activity indices; defaults to the video's positives.
        #[arg(long, value_delimiter = ',')]
        activities: Option<Vec<usize>>,
    },
    /// List every config key with its default.
    Config,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .code(CONFIG)?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).code(CONFIG)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o).code(CONFIG)?;
    }
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval {
            checkpoint,
            split,
            compare_rates,
        } => commands::eval_cmd(&cfg, checkpoint.as_deref(), &split, compare_rates),
        Command::Params { published } => commands::params_cmd(&cfg, published),
        Command::Visualize {
            checkpoint,
            video,
            activities,
        } => commands::visualize_cmd(&cfg, checkpoint.as_deref(), video, activities.as_deref()),
        Command::Config => {
            for (key, doc) in config::KEYS {
                println!("# {doc}");
                let line = cfg.render().lines().find(|l| l.starts_with(&format!("{key} ="))).map(str::to_string);
                println!("{}", line.unwrap_or_default());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
