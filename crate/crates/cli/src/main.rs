mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "posedet", version, about = "Pose-augmented anchor-free behavior detector")]
struct Cli {
    /// More progress output on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// TOML config file. Defaults to $POSEDET_CONFIG_DIR/posedet.toml when present.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.base_lr=0.02`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus.
    Synth(SynthArgs),
    /// Standardize a raw corpus to the network input size.
    Prepare(PrepareArgs),
    /// Train a detector on a manifest.
    Train(TrainArgs),
    /// Score a checkpoint or a detections file against ground truth.
    Eval(EvalArgs),
    /// Detect on one image and write an overlay and detections JSON.
    Infer(InferArgs),
    /// Train and evaluate the backbone/stack grid.
    Ablate(AblateArgs),
    /// Write a PNG of the per-level target maps for one image.
    DumpTargets(DumpArgs),
    /// Write a PNG of the keypoint heatmap channels for one image.
    DumpHeatmaps(DumpArgs),
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Tiny,
    Standard,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Manifest of the raw corpus.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines step log; appended to.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    pub checkpoint: Option<PathBuf>,
    /// Detections as a JSON array or JSON lines of `{image_id, class, score, box}`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory for `<stem>_overlay.png` and `<stem>_detections.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth VOC XML drawn in white and matched against.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Minimum score drawn in the overlay.
    #[arg(long, default_value_t = 0.3)]
    pub min_score: f64,
    /// IoU used when matching against `--boxes`.
    #[arg(long, default_value_t = 0.5)]
    pub match_iou: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = GridArg::Tiny)]
    pub grid: GridArg,
    /// Stack counts for the tiny grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
    pub stacks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image to dump; the first manifest entry when omitted.
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let path = config::resolve_path(cli.config.as_deref());
    let cfg = config::load(path.as_deref(), &cli.overrides)?;
    let ctx = commands::Context { cfg, verbose: cli.verbose };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::Prepare(a) => commands::prepare(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Infer(a) => commands::infer(&ctx, &a),
        Command::Ablate(a) => commands::ablate(&ctx, &a),
        Command::DumpTargets(a) => commands::dump_targets(&ctx, &a),
        Command::DumpHeatmaps(a) => commands::dump_heatmaps(&ctx, &a),
        Command::Config => {
            print!("{}", config::to_toml(&ctx.cfg));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.label());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
