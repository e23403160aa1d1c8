//! The `etf` command line: `train`, `eval`, `flops` and `compare`.
//!
//! Every command writes its artifacts under an output directory and prints
//! a short human summary. [`exit_code`] maps library errors to process exit
//! codes.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{AdamMeta, Checkpoint, Manifest, TensorEntry};
pub use commands::{
    compare, compare_configs, compare_seed, eval, flops, train, CompareArgs, CompareReport, EvalArgs, FlopsArgs, SeedComparison, Split,
    TrainArgs, TrainReport, CHECKPOINT_FILE,
};
pub use config::RunConfig;

use std::io::Write;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "etf", version, about = "Ensemble-token fusion of frozen task encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the task encoders, then fine-tune fuser and canonical decoder.
    Train(TrainArgs),
    /// Score a checkpoint on the canonical task.
    Eval(EvalArgs),
    /// Analytic fuser cost under both MAC conventions.
    Flops(FlopsArgs),
    /// Two configs (by default: baseline and fuser) over several seeds.
    Compare(CompareArgs),
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a, out).map(|_| ()),
        Command::Eval(a) => eval(&a, out).map(|_| ()),
        Command::Flops(a) => flops(&a, out),
        Command::Compare(a) => compare(&a, out).map(|_| ()),
    }
}

/// 2 config or JSON, 3 numeric failure, 4 digest mismatch, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Numeric { .. } => 3,
        Error::DigestMismatch { .. } => 4,
        _ => 1,
    }
}

/// Applies `ETF_THREADS` to the global rayon pool. Ignored when unset or
/// when the pool already exists.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ETF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| Error::config("ETF_THREADS", format!("`{raw}` is not a thread count")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
