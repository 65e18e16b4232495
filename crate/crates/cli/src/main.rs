//! `tsg`: synthetic data, two-stage training, topic scene graph generation,
//! evaluation and attention inspection.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tsg_core::Error;

#[derive(Parser, Debug, Clone)]
#[command(
    name = "tsg",
    version,
    about = "Topic scene graphs via attention distillation"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate the synthetic benchmark (vocab.tsv and train/val/test JSON lines).
    DatasetSynth(SynthArgs),
    /// Train stage 1 (captioner), stage 2 (distilled importance head) or the
    /// label-supervised upper bound.
    Train(TrainArgs),
    /// Caption every ordered object pair and rank them into topic scene graphs.
    Generate(GenerateArgs),
    /// Score a prediction file against a dataset split.
    Eval(EvalArgs),
    /// Dump attention and importance scores for one image, with SVG charts.
    Inspect(InspectArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct AblationArgs {
    /// Attention pooling over time.
    #[arg(long, value_parser = ["max", "mean"])]
    pub pooling: Option<String>,
    /// Importance query features.
    #[arg(long, value_parser = ["U", "SO", "SOU", "SOUS"])]
    pub features: Option<String>,
    /// Pool attention over noun positions only.
    #[arg(long)]
    pub mask_non_nouns: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
pub enum Stage {
    #[value(name = "1")]
    #[serde(rename = "1")]
    One,
    #[value(name = "2")]
    #[serde(rename = "2")]
    Two,
    #[value(name = "2-label")]
    #[serde(rename = "2-label")]
    TwoLabel,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory written by `dataset-synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Stage-1 checkpoint directory (stages 2 and 2-label).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Precomputed visual features manifest (`features.json`).
    #[arg(long)]
    pub visual_features: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Pair ranking.
    #[arg(long, default_value = "eta", value_parser = ["eta", "likelihood", "beta_oracle"])]
    pub rank: String,
    /// Keep the best K relations per image.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub visual_features: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    /// Output directory; predictions go to `predictions.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Prediction JSON lines.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory; the report goes to `metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image_id: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub visual_features: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// `manifest.json` of the run to repeat.
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) => 2,
        Error::Schema { .. } => 3,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::EmptyCaption => "empty_caption",
        Error::Config(_) => "config",
        Error::Usage(_) => "usage",
        Error::Schema { .. } => "schema",
        Error::Checkpoint(_) => "checkpoint",
        Error::EmptyPoolingWindow => "empty_pooling_window",
        Error::EmptyGroundTruth => "empty_ground_truth",
        Error::DegenerateSupervision => "degenerate_supervision",
        Error::Diverged(_) => "diverged",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli, std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": kind(&e), "code": exit_code(&e), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
