//! Command-line runner: training stages, generation, benchmarks and sweeps.
//!
//! Exit codes: 0 success, 1 failed check or runtime failure, 2 usage error.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pgm;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use hlora_core::Error;

#[derive(Debug, Parser)]
#[command(name = "hlora", version, about = "Task-gated merged-expert adapters on a tiny vision-language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one or more training stages and write a checkpoint after each.
    Train(TrainArgs),
    /// Answer a question about an image, or generate an image.
    Generate(GenerateArgs),
    /// Time LoRA, per-expert MoELoRA and merged H-LoRA forwards.
    Bench(BenchArgs),
    /// Measure task conflict while mixing in the other task's data.
    Sweep(SweepArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Stage tags, comma separated, run in order: 1c, 1g, 2, 3c, 3g, mixed.
    #[arg(long, value_delimiter = ',', required = true)]
    pub stage: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Load a checkpoint whose config hash differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Comp,
    Gen,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Text prompt, e.g. `count?` or `draw shape=cross size=2 pos=4`.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Input image as a plain graymap.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Where a generated image goes; its codes go to `<out>.indices.txt`.
    #[arg(long, default_value = "generated.pgm")]
    pub out: PathBuf,
    /// Compare against a config file; its hash must match unless `--force`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Most tokens to emit; defaults to the model's sequence budget.
    #[arg(long)]
    pub max_new: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,32")]
    pub experts: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 128)]
    pub tokens: usize,
    /// Input and output width of the adapted projection.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 21)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Time the forward pass only.
    #[arg(long)]
    pub forward_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bench.csv")]
    pub csv: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Shared,
    Hlora,
    Both,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Mixing ratios; defaults to the config's `sweep.ratios`.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "both")]
    pub arch: ArchArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Bad input (config, paths, stage order) is a usage error; failed checks
/// and runtime failures are 1.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Io(_) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

pub fn run(cli: Cli) -> hlora_core::Result<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Sweep(a) => commands::sweep(&a),
    }
}
