use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gatefuse::data::InteractionMode;
use gatefuse::model::AblationConfig;

#[derive(Debug, Parser)]
#[command(
    name = "gatefuse",
    version,
    about = "Gated cross-modal fusion for utterance sentiment classification"
)]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration with optional `train`, `synth` and `paths` sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic JSONL dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Report self-attention scores and gate values for one video.
    Inspect(InspectArgs),
    /// Compare analytic gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_ablation(s: &str) -> Result<AblationConfig, String> {
    AblationConfig::from_name(s).ok_or_else(|| format!("unknown ablation {s:?}; expected b1..b6"))
}

/// Per-modality corruption probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise(pub [f64; 3]);

fn parse_noise(s: &str) -> Result<Noise, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.len() {
        1 => Ok(Noise([v[0]; 3])),
        3 => Ok(Noise([v[0], v[1], v[2]])),
        n => Err(format!("expected 1 or 3 comma-separated values, got {n}")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub videos: Option<usize>,
    /// xor, majority or redundant.
    #[arg(long)]
    pub mode: Option<InteractionMode>,
    #[arg(long)]
    pub min_utterances: Option<usize>,
    #[arg(long)]
    pub max_utterances: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub audio_dim: Option<usize>,
    #[arg(long)]
    pub video_dim: Option<usize>,
    /// Corruption probability: one value for all modalities or `t,a,v`.
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<Noise>,
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    /// Validation split used for model selection.
    #[arg(long, value_name = "PATH")]
    pub val: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch CSV; defaults to `metrics.csv` in the output directory.
    #[arg(long, value_name = "PATH")]
    pub metrics: Option<PathBuf>,
    /// b1..b6.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<AblationConfig>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to score; defaults to the configured test split.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Per-utterance CSV; defaults to `predictions.csv` in the output directory.
    #[arg(long, value_name = "PATH")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    #[arg(long = "video", value_name = "ID")]
    pub video: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_ablation, default_value = "b6")]
    pub ablation: AblationConfig,
    #[arg(long, default_value_t = 3)]
    pub hidden: usize,
    /// Feature width of every modality.
    #[arg(long, default_value_t = 4)]
    pub dims: usize,
    #[arg(long, default_value_t = 4)]
    pub utterances: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Corrupts the sigmoid backward rule to confirm the check can fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}
