//! Command-line surface: train, interpolate, evaluate, optimize-beta, compare
//! and replay.
//!
//! Exit codes: 0 success, 2 usage error (one-line diagnostic), 1 runtime error.

mod commands;
pub mod image;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::AidError;
use crate::model::ShapeClass;
use crate::pipeline::Method;

pub use commands::{parse_guidance, worker_threads};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(AidError),
}

impl From<AidError> for CliError {
    fn from(e: AidError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "aidkit", version, about = "Attention interpolation for a toy conditional diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Generate one interpolation sequence archive.
    Interpolate(InterpolateArgs),
    /// Score sequence archives.
    Evaluate(EvaluateArgs),
    /// Search the Beta prior of the coefficient schedule.
    OptimizeBeta(OptimizeArgs),
    /// Run all four methods over random class pairs.
    Compare(CompareArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: AidError| e.to_string())
}

fn parse_class(s: &str) -> Result<ShapeClass, String> {
    s.parse().map_err(|e: AidError| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceArg {
    Pixel,
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturesArg {
    Encoder,
    Downsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveArg {
    Smoothness,
    Consistency,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// SGD steps.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seeds the dataset, initialization, batches and held-out batch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Training images per class.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
}

/// Flags shared by every command that generates sequences.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SequenceArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    /// text | denoise | aid-i | aid-o
    #[arg(long, default_value = "aid-o", value_parser = parse_method)]
    pub mode: Method,
    /// Fused attention (attention modes only; default on).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fused: Option<bool>,
    /// Sequence length.
    #[arg(long, default_value_t = 7)]
    pub m: usize,
    /// Prompt guidance: a class name or "a+b" for the mean of two classes.
    #[arg(long)]
    pub guidance: Option<String>,
    /// Sampler steps with interpolated attention.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed_a: u64,
    #[arg(long, default_value_t = 1)]
    pub seed_b: u64,
    #[arg(long, default_value = "circle", value_parser = parse_class)]
    pub class_a: ShapeClass,
    #[arg(long, default_value = "square", value_parser = parse_class)]
    pub class_b: ShapeClass,
    /// DDIM sampler steps.
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    /// Denoising baseline: run the first ⌊t·T⌋ steps on class B instead of A.
    #[arg(long)]
    pub flip_denoise: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InterpolateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sequence: SequenceArgs,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value = "sequence")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Sequence archive directories.
    #[arg(required = true, num_args = 1..)]
    pub archives: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = DistanceArg::Pixel)]
    pub distance: DistanceArg,
    #[arg(long, value_enum, default_value_t = FeaturesArg::Encoder)]
    pub features: FeaturesArg,
    /// Needed by encoder distance/features; defaults to the first archive's checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub sequence: SequenceArgs,
    #[arg(long, default_value_t = 15)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Smoothness)]
    pub objective: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = DistanceArg::Pixel)]
    pub distance: DistanceArg,
    #[arg(long, default_value_t = 0)]
    pub bo_seed: u64,
    #[arg(long, default_value = "optimize")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    /// Random class pairs.
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    /// Master seed for pairs, latent seeds and the prior searches.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 7)]
    pub m: usize,
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    /// Prior-search rounds after the initial grid.
    #[arg(long, default_value_t = 15)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = DistanceArg::Pixel)]
    pub distance: DistanceArg,
    #[arg(long, value_enum, default_value_t = FeaturesArg::Encoder)]
    pub features: FeaturesArg,
    #[arg(long, default_value = "compare")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return 2;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
