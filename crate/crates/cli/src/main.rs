use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod failure;

use failure::Failure;

#[derive(Parser)]
#[command(name = "pmss", version, about = "Stage-wise prompt-matched tuning of frozen segmentation backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Run config (JSON). Omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Frozen backbone written by `pmss pretrain`; skips the config's pretraining.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a pipeline and write manifest, report stream and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory (or the data its config describes).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `pmss data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which samples to score: train, val or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write metrics.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Trainable-parameter breakdown (backbone / prompt / head) per strategy.
    Count {
        #[command(flatten)]
        run: RunArgs,
        /// Also sweep prompted stages 1..=N+1 and recurrent iterations 1..=3.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// layers, spm or pipeline (broken runs the negative control).
        #[arg(long, default_value = "layers")]
        scope: String,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = pmss::gradsuite::DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Ablation sweep along one axis, each row over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// stages, recurrent, spl or lscm.
        #[arg(long)]
        axis: String,
        /// Number of seeds per row, starting at `train.seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Repeated one-shot protocol on a two-class task; reports Dice mean±std.
    Oneshot {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Pretrain the config's backbone on its source task and save it frozen.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the config's downstream dataset to a directory.
    Data {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { run, out } => commands::train(&run, &out),
        Command::Eval { checkpoint, data, split, out, json } => {
            commands::eval(&checkpoint, data.as_deref(), &split, out.as_deref(), json)
        }
        Command::Count { run, sweep, out, json } => commands::count(&run, sweep, out.as_deref(), json),
        Command::Gradcheck { scope, seed, seeds, out, json } => {
            commands::gradcheck(&scope, seed, seeds, out.as_deref(), json)
        }
        Command::Ablate { run, axis, seeds, out, json } => commands::ablate(&run, &axis, seeds, out.as_deref(), json),
        Command::Oneshot { run, repetitions, split_seed, out, json } => {
            commands::oneshot(&run, repetitions, split_seed, out.as_deref(), json)
        }
        Command::Pretrain { run, out } => commands::pretrain(&run, &out),
        Command::Data { run, out } => commands::data(&run, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code)
        }
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Failure::io)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(Failure::io)
}
