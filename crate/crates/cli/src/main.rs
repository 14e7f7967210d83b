use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masters::config::{load_config, RunConfig};
use masters::pipeline::{self, Outcome};
use masters::trainer::Mode;
use masters::Result;

/// Mask-progressive distillation pipeline for small transformers.
#[derive(Parser, Debug)]
#[command(name = "masters", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Override a config key, e.g. `--set teachers.0.budget=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite outputs that already exist.
    #[arg(long)]
    force: bool,
    /// Worker threads for parallel steps (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train teachers on the training tasks.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Only this teacher id.
        #[arg(long)]
        teacher: Option<String>,
    },
    /// Write magnitude-masked teacher checkpoints for every stage ratio.
    Mask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<String>,
    },
    /// Generate the train and held-out task sets.
    GenTasks {
        #[command(flatten)]
        common: Common,
    },
    /// Sample all response groups into the offline store.
    Pregenerate {
        #[command(flatten)]
        common: Common,
        /// Store directory (default: <root>/store).
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Score stored responses for accuracy.
    Judge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train the student from the judged store.
    Train {
        #[command(flatten)]
        common: Common,
        /// naive | progressive | masters (default: from config).
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out tasks.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        /// Checkpoint to evaluate (default: the trained student of --mode).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare trained modes and write plot-ready CSVs.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn prepare(common: &Common) -> Result<RunConfig> {
    if let Some(n) = common.workers {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    load_config(&common.config, &common.set)
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::PretrainTeacher { common, teacher } => {
            pipeline::pretrain_teachers(&prepare(&common)?, teacher.as_deref(), common.force)
        }
        Command::Mask { common, teacher } => pipeline::mask_teachers(&prepare(&common)?, teacher.as_deref(), common.force),
        Command::GenTasks { common } => pipeline::gen_tasks(&prepare(&common)?, common.force),
        Command::Pregenerate { common, store } => {
            pipeline::pregenerate_store(&prepare(&common)?, store.as_deref(), common.force)
        }
        Command::Judge { common, store } => pipeline::judge_store(&prepare(&common)?, store.as_deref()),
        Command::Train { common, mode, store } => {
            let config = prepare(&common)?;
            pipeline::train(&config, mode.unwrap_or(config.mode), store.as_deref(), common.force)
        }
        Command::Evaluate { common, mode, checkpoint } => {
            let config = prepare(&common)?;
            pipeline::evaluate_checkpoint(&config, mode.unwrap_or(config.mode), checkpoint.as_deref(), common.force)
        }
        Command::Report { common } => pipeline::report(&prepare(&common)?, common.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(outcome) => {
            for path in &outcome.written {
                println!("wrote {}", path.display());
            }
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
