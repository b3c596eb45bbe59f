use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "shadowsam", version, about = "Video shadow detection: fine-tune, train, infer, evaluate, ablate, serve")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true, env = "SHADOWSAM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lst_blocks=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune the segmenter's mask decoder on annotated frames.
    Finetune(FinetuneArgs),
    /// Train the propagation network on annotated clips.
    TrainLstn(TrainArgs),
    /// Segment the first frame and propagate it forward.
    Infer(InferArgs),
    /// Forward and backward propagation with re-prediction of disagreeing frames.
    InferPlus(InferPlusArgs),
    /// Score a prediction tree against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate propagation variants along one axis.
    Ablate(AblateArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic moving-shadow dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Dataset root with `videos/` and `annotations/`.
    #[arg(long, env = "SHADOWSAM_DATA")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these videos (default: all annotated videos).
    #[arg(long = "video")]
    pub videos: Vec<String>,
    /// Start from a segmenter checkpoint or an adapter manifest (`.json`).
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "SHADOWSAM_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "video")]
    pub videos: Vec<String>,
    /// Start from a propagation-network checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Segmenter checkpoint, or an adapter manifest (`.json`).
    #[arg(long, env = "SHADOWSAM_SEGMENTER")]
    pub segmenter: PathBuf,
    /// Propagation-network checkpoint.
    #[arg(long, env = "SHADOWSAM_LSTN")]
    pub lstn: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Box file for the first frame (single video only).
    #[arg(long, conflicts_with_all = ["boxes_dir", "boxes_from_gt"])]
    pub boxes: Option<PathBuf>,
    /// Directory of `<video>.txt` box files (and `<video>.last.txt` for the last frame).
    #[arg(long, conflicts_with = "boxes_from_gt")]
    pub boxes_dir: Option<PathBuf>,
    /// Derive boxes from the ground truth of the prompted frames.
    #[arg(long)]
    pub boxes_from_gt: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, env = "SHADOWSAM_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Videos to process (default: all).
    #[arg(long = "video")]
    pub videos: Vec<String>,
    #[command(flatten)]
    pub models: ModelArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
}

#[derive(Debug, Args)]
pub struct InferPlusArgs {
    #[command(flatten)]
    pub infer: InferArgs,
    /// Box file for the last frame (single video only).
    #[arg(long, conflicts_with_all = ["boxes_dir", "boxes_from_gt"])]
    pub last_boxes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction tree `<pred>/<video>/<frame>.png`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth tree, or a dataset root whose `annotations` directory is used.
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write `report.txt` and `report.jsonl` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Number of attention blocks.
    Blocks,
    /// Short-term attention window side.
    Window,
    /// Long-term and short-term attention on or off.
    Components,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn enabled(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub axis: Axis,
    /// Training dataset root.
    #[arg(long, env = "SHADOWSAM_DATA")]
    pub data: PathBuf,
    /// Evaluation dataset root (default: the training root).
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Values to sweep for `blocks` or `window`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    /// With `components`, run only this long-term setting.
    #[arg(long)]
    pub long: Option<Toggle>,
    /// With `components`, run only this short-term setting.
    #[arg(long)]
    pub short: Option<Toggle>,
    /// Seed the first frame with this segmenter and boxes from ground truth
    /// instead of the ground-truth mask itself.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SHADOWSAM_DATA")]
    pub data: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Directory holding persisted sessions.
    #[arg(long, env = "SHADOWSAM_STATE", default_value = "sessions")]
    pub state: PathBuf,
    #[arg(long, env = "SHADOWSAM_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "SHADOWSAM_PORT", default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub videos: usize,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
