//! `mvocc` command-line driver.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or input files. Exit code 2.
    #[error("{0}")]
    Validation(String),
    /// Failure while running. Exit code 1.
    #[error(transparent)]
    Runtime(#[from] mvocc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    mvocc::nnet::NnetError,
    mvocc::forest::ForestError,
    mvocc::metrics::MetricsError,
    mvocc::multiview::MultiViewError
);

#[derive(Debug, Parser)]
#[command(name = "mvocc", version, about = "Multi-camera ground-plane occupancy detection")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named profile (built-in: desk, paper-mono, paper-mv, quick).
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed (default 0; a scenario file's own seed wins for synth).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Train the monocular classifier.
    TrainMono(TrainMonoArgs),
    /// Build and train the multi-view classifier.
    TrainMv(TrainMvArgs),
    /// Score every cell of every frame, then suppress duplicates.
    Detect(DetectArgs),
    /// MODA, MODP, precision, recall and ROC against annotations.
    Eval(EvalArgs),
    /// Suppress duplicates in a detection file.
    Nms(NmsArgs),
    /// Per-view split counts of a forest as CSV.
    InspectForest(InspectForestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scenario JSON: a full scene or generator parameters. Defaults to the
    /// standard scene.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of frames of a generated scene.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with calibrations.json, grid.json,
    /// annotations.jsonl and cam*/frame*.png.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainMonoArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_input_dropout: bool,
    #[arg(long)]
    pub mask_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HardNegArg {
    None,
    Shift,
    Mix,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassifierArg {
    Mlp,
    Forest,
}

#[derive(Debug, Args)]
pub struct TrainMvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Monocular checkpoint to take ψ from.
    #[arg(long, required_unless_present = "resume")]
    pub mono: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this multi-view checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_enum)]
    pub hard_negatives: Option<HardNegArg>,
    #[arg(long, value_enum)]
    pub classifier: Option<ClassifierArg>,
    /// Also write the trained forest as JSON.
    #[arg(long)]
    pub forest_out: Option<PathBuf>,
    /// Train the embeddings together with the head.
    #[arg(long)]
    pub unfreeze: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for detections.jsonl, candidates.jsonl and
    /// occupancy.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Frame range `start:end` (end exclusive).
    #[arg(long, value_parser = parse_range)]
    pub frames: Option<(usize, usize)>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    #[arg(long)]
    pub min_cell_distance: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground truth; defaults to the dataset's annotations.jsonl.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Output directory for report.json, roc.csv and sweep.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-suppression candidates, enables the NMS threshold sweep.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Occupancy CSV; the ROC is then computed over all cells.
    #[arg(long)]
    pub occupancy: Option<PathBuf>,
    #[arg(long, value_parser = parse_range)]
    pub frames: Option<(usize, usize)>,
    #[arg(long)]
    pub match_radius: Option<f64>,
    /// Comma-separated NMS thresholds for the sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// Needs `--grid` (or `--data`).
    #[arg(long)]
    pub min_cell_distance: Option<usize>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct InspectForestArgs {
    /// Forest JSON.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub forest: Option<PathBuf>,
    /// Multi-view checkpoint with a forest classifier.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10, 50, 100])]
    pub top_k: Vec<usize>,
    /// Features per view; taken from the checkpoint with `--model`.
    #[arg(long)]
    pub q: Option<usize>,
    /// Number of views; taken from the checkpoint with `--model`.
    #[arg(long)]
    pub views: Option<usize>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    if a > b {
        return Err(format!("start {a} is after end {b}"));
    }
    Ok((a, b))
}

/// Runs one parsed invocation; stdout receives summaries and tables.
pub fn run(cli: Cli, stdout: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.profile.as_deref(), &cli.overrides)?;
    let ctx = commands::Context {
        cfg,
        seed: cli.seed.unwrap_or(0),
        seed_flag: cli.seed,
    };
    let mut go = move || -> Result<(), CliError> {
        match &cli.command {
            Command::Synth(a) => commands::synth(&ctx, a, stdout),
            Command::TrainMono(a) => commands::train_mono(&ctx, a, stdout),
            Command::TrainMv(a) => commands::train_mv(&ctx, a, stdout),
            Command::Detect(a) => commands::detect(&ctx, a, stdout),
            Command::Eval(a) => commands::eval(&ctx, a, stdout),
            Command::Nms(a) => commands::nms(&ctx, a, stdout),
            Command::InspectForest(a) => commands::inspect_forest(&ctx, a, stdout),
        }
    };
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?
            .install(go)
    } else {
        go()
    }
}
