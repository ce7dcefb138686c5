//! `coc`: train, evaluate, inspect and visualize context-cluster models.
//!
//! JSON results go to stdout, progress to stderr. Exit codes: 0 success,
//! 2 usage, 3 data or checkpoint problems, 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coc_core::Error;

#[derive(Parser, Debug)]
#[command(name = "coc", version, about = "Context-cluster image backbone")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs on any machine).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// tiny, tiny-dagger, small, medium or micro32.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// `key = value` file; may start from `preset = name`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// no-position, no-cluster-op, single-head or no-partition (repeatable).
    #[arg(long = "ablate")]
    ablate: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// `synthetic:quadrant[:N]`, `cifar10` (under $COC_DATA_DIR) or a CIFAR-10 directory.
    #[arg(long)]
    data: Option<String>,
    /// Use only the first N training examples.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its log and checkpoints.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 16)]
        micro_batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        #[arg(long, default_value_t = 2)]
        warmup_epochs: usize,
        /// Stop after the first epoch whose training accuracy reaches this.
        #[arg(long)]
        target_accuracy: Option<f64>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Report loss and accuracy on the evaluation split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Without one, a freshly initialized model is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        micro_batch: usize,
    },
    /// Render clustering maps of one image as PPM files.
    Viz {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A binary PPM file, or `synthetic:quadrant`.
        #[arg(long)]
        image: String,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
        /// Pixels per point; defaults to reaching the input resolution.
        #[arg(long)]
        upscale: Option<usize>,
        #[arg(long, default_value_t = 0)]
        palette_seed: u64,
        /// Blend the input image over the map with this weight.
        #[arg(long)]
        overlay: Option<f32>,
        /// Cluster over whole grids instead of regions.
        #[arg(long)]
        no_partition: bool,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Parameter and multiply-accumulate counts.
    Params {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Time one context-cluster op at 1, 4, 16 and 64 regions.
    Bench {
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
        Error::NonFinite { .. } | Error::NumericalAbort { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
