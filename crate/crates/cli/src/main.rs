mod commands;
mod config;
mod error;
mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::config::{ExperimentConfig, Surgery};
use crate::error::CliError;
use crate::record::{digests, describe_version, RunRecord, Task, RUN_FILE};

#[derive(Parser)]
#[command(name = "longattn", version, about = "Local and global-local attention for long-input seq2seq")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set finetune.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "LONGATTN_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Data-parallel worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test examples and pretraining documents.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Gap-sentence pretraining from a gen-data directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Apply checkpoint surgeries.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        /// Surgeries in order; defaults to `adapt.chain`.
        #[arg(long, value_enum, value_delimiter = ',')]
        surgery: Vec<Surgery>,
    },
    /// Supervised training on a gen-data directory.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; a fresh model when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Decode and score a test set, or score candidate/reference JSONL files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to decode with.
        #[arg(long, requires = "data", conflicts_with_all = ["cand", "reference"])]
        from: Option<PathBuf>,
        /// gen-data directory whose test split is decoded.
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSONL of candidate token-id arrays, one per line.
        #[arg(long, requires = "reference")]
        cand: Option<PathBuf>,
        /// JSONL of reference token-id arrays, aligned with `--cand`.
        #[arg(long = "ref", requires = "cand")]
        reference: Option<PathBuf>,
    },
    /// Attention cost scaling over sequence length.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Write encoder self-attention masks as PBM images.
    DumpMask {
        #[command(flatten)]
        common: Common,
    },
    /// Rerun a recorded command and compare output digests.
    Replay {
        /// A run.json or the directory holding it.
        run: PathBuf,
        /// Where to write the rerun.
        #[arg(long)]
        out: PathBuf,
    },
}

struct Run {
    task: Task,
    seed: u64,
    workers: usize,
    config: ExperimentConfig,
    out: PathBuf,
}

fn resolve(common: Common, task: Task) -> Result<Run, CliError> {
    if common.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    Ok(Run {
        config: ExperimentConfig::resolve(common.config.as_deref(), &common.overrides)?,
        task,
        seed: common.seed,
        workers: common.workers,
        out: common.out,
    })
}

/// Runs the task and writes run.json next to its outputs.
fn execute(run: &Run) -> Result<RunRecord, CliError> {
    let outcome = commands::execute(&run.task, &run.config, run.seed, run.workers, &run.out)?;
    let record = RunRecord {
        task: run.task.clone(),
        seed: run.seed,
        workers: run.workers,
        version: describe_version(),
        config: run.config.clone(),
        outputs: digests(&run.out, &outcome.outputs)?,
    };
    record.write(&run.out)?;
    match outcome.failure {
        Some(msg) => Err(CliError::Acceptance(msg)),
        None => Ok(record),
    }
}

fn replay(path: &Path, out: PathBuf) -> Result<(), CliError> {
    let path = if path.is_dir() { path.join(RUN_FILE) } else { path.to_path_buf() };
    let old = RunRecord::read(&path)?;
    let run = Run {
        task: old.task.clone(),
        seed: old.seed,
        workers: old.workers,
        config: old.config.clone(),
        out,
    };
    let new = match execute(&run) {
        Ok(r) => r,
        Err(CliError::Acceptance(_)) => RunRecord::read(&run.out.join(RUN_FILE))?,
        Err(e) => return Err(e),
    };
    if old.version != new.version {
        info!("recorded under {}, replayed under {}", old.version, new.version);
    }
    let mismatched: Vec<&String> = old
        .outputs
        .iter()
        .filter(|(k, v)| new.outputs.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    if mismatched.is_empty() && old.outputs.len() == new.outputs.len() {
        info!("all {} outputs reproduced", old.outputs.len());
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("outputs differ from the record: {mismatched:?}")))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let run = match cli.command {
        Command::GenData { common } => resolve(common, Task::GenData)?,
        Command::Pretrain { common, data } => resolve(common, Task::Pretrain { data })?,
        Command::Adapt { common, from, surgery } => resolve(common, Task::Adapt { from, surgery })?,
        Command::Finetune { common, data, from } => resolve(common, Task::Finetune { data, from })?,
        Command::Eval {
            common,
            from,
            data,
            cand,
            reference,
        } => resolve(
            common,
            Task::Eval {
                from,
                data,
                cand,
                reference,
            },
        )?,
        Command::Bench { common } => resolve(common, Task::Bench)?,
        Command::DumpMask { common } => resolve(common, Task::DumpMask)?,
        Command::Replay { run, out } => return replay(&run, out),
    };
    execute(&run).map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
