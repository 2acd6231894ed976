//! `sttr`: data preparation, training, evaluation and score fusion for
//! spatial/temporal self-attention skeleton action recognition.
//!
//! Failures print a single line `error: kind=<kind> msg=<message>` on stderr.
//! Usage errors (bad flags, missing inputs, malformed configs) exit with 2,
//! everything else with 1.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sttr_core::network::Stream;

use config::SplitKind;

#[derive(Parser, Debug)]
#[command(name = "sttr", version, about = "Skeleton action recognition with spatial and temporal self-attention")]
pub struct Cli {
    /// Directory against which relative data, checkpoint, score and output paths
    /// are resolved. Config file paths stay relative to the working directory.
    #[arg(long, env = "STTR_RUN_ROOT", default_value = ".", global = true)]
    pub run_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset as a packed clip file.
    Synth(SynthArgs),
    /// Ingest a directory of NTU `.skeleton` files into a packed clip file.
    ParseNtu(ParseNtuArgs),
    /// Train one stream; writes config, metrics, checkpoint and held-out scores.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sum the class probabilities of two score tables and report accuracies.
    Fuse(FuseArgs),
    /// Print itemized parameter counts.
    Params(ParamsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// TOML config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output packed clip file; the resolved config is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub clips_per_class: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long)]
    pub bodies: Option<usize>,
    /// Half-width of the uniform coordinate noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ParseNtuArgs {
    /// TOML config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `.skeleton` files.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output packed clip file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frames per clip after loop padding or truncation.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub max_bodies: Option<usize>,
    /// Rotate each clip so the spine points up and the shoulders along +x.
    #[arg(long)]
    pub align_axes: bool,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Skip files that fail to parse instead of aborting; each is reported on stderr.
    #[arg(long)]
    pub skip_invalid: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// s-tr or t-tr.
    #[arg(long)]
    pub stream: Option<Stream>,
    /// Train on bone vectors (6 channels, doubled widths) instead of joints.
    #[arg(long)]
    pub bones: bool,
    /// `synth` to generate data from the config, or a packed clip file.
    #[arg(long)]
    pub data: Option<String>,
    /// Output directory (default `runs/<stream>-<joints|bones>-seed<seed>`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// First-layer width; later widths scale with it and 64 is the full-size network.
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate is divided.
    #[arg(long, value_delimiter = ',')]
    pub lr_drop_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_drop_factor: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Attention dropout rate.
    #[arg(long)]
    pub drop_rate: Option<f64>,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub split: Option<SplitKind>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Omit wall-clock times so repeated runs write identical files.
    #[arg(long)]
    pub deterministic: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A training output directory: supplies the checkpoint, data and split.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `synth` (default synthetic dataset) or a packed clip file.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, value_enum)]
    pub split: Option<SplitKind>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Score table to write (default `<run>/eval.scores` or `eval.scores`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    /// Write fused per-sample scores and predictions here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Channel width of the single-unit comparison table.
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 9)]
    pub kernel: usize,
    #[arg(long, default_value_t = 8)]
    pub max_heads: usize,
    /// Also itemize a whole stream.
    #[arg(long)]
    pub stream: Option<Stream>,
    #[arg(long, default_value_t = 60)]
    pub classes: usize,
    #[arg(long)]
    pub bones: bool,
    #[arg(long, default_value_t = 64)]
    pub base_width: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(sttr_core::Error),
    /// A check ran to completion and failed.
    Failed(String),
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::Failed(_) => "check-failed",
            CliError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Failed(m) | CliError::Internal(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<sttr_core::Error> for CliError {
    fn from(e: sttr_core::Error) -> Self {
        CliError::Core(e)
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error: kind={} msg={}", e.kind(), config::one_line(&e.message()));
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail(&CliError::usage(first));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
