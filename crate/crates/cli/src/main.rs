mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use restitch_core::{Error, ErrorClass};

pub const THREADS_ENV: &str = "RESTITCH_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "restitch",
    version,
    about = "Similarity-guided model stitching at desk scale"
)]
struct Cli {
    /// JSON object of options; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image-classification dataset.
    GenData(GenData),
    /// Train a parent network from scratch.
    TrainBase(TrainBase),
    /// Write activation tapes for one model.
    Capture(Capture),
    /// Build the layer-pair similarity matrix from tapes or live models.
    Cka(Cka),
    /// Select a stitch point under a budget.
    Plan(Plan),
    /// Assemble a stitched model from a plan.
    Stitch(Stitch),
    /// Fine-tune a stitched model under a freeze scope.
    Finetune(Finetune),
    /// Report accuracy of a stitched or plain model.
    Eval(Eval),
    /// Select (and optionally train) one stitch per budget.
    Sweep(Sweep),
    /// Summarize finished runs as a markdown table.
    Report(Report),
    /// Re-hash an output directory against its run manifest.
    Verify(Verify),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Image shape as CxHxW.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainBase {
    /// Network spec JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Capture {
    /// Spec JSON; defaults to spec.json inside --weights.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Cka {
    #[arg(long, conflicts_with_all = ["front_spec", "back_spec"])]
    pub front_tapes: Option<PathBuf>,
    #[arg(long)]
    pub back_tapes: Option<PathBuf>,
    /// Live mode: trained model directory (or spec JSON with --front-weights).
    #[arg(long)]
    pub front_spec: Option<PathBuf>,
    #[arg(long)]
    pub back_spec: Option<PathBuf>,
    #[arg(long)]
    pub front_weights: Option<PathBuf>,
    #[arg(long)]
    pub back_weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Plan {
    #[arg(long)]
    pub similarity: Option<PathBuf>,
    /// Spec JSON or model directory of either parent.
    #[arg(long)]
    pub front_spec: Option<PathBuf>,
    #[arg(long)]
    pub back_spec: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<u64>,
    /// params, flops or trainable.
    #[arg(long)]
    pub metric: Option<String>,
    /// slow-to-fast or fast-to-slow.
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Stitch {
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Trained model directories of the two parents.
    #[arg(long)]
    pub front_weights: Option<PathBuf>,
    #[arg(long)]
    pub back_weights: Option<PathBuf>,
    /// least-squares or random.
    #[arg(long)]
    pub init: Option<String>,
    /// Front and back tape sets used to fit the least-squares init.
    #[arg(long, num_args = 2, value_names = ["FRONT", "BACK"])]
    pub calib_tapes: Option<Vec<PathBuf>>,
    /// Dataset used for least-squares calibration when no tapes are given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub calib_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Finetune {
    /// Stitched model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// stitch-only, stitch-back, stitch-front or full.
    #[arg(long)]
    pub scope: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Stitched or plain model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Also write eval.json and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Sweep {
    #[arg(long)]
    pub similarity: Option<PathBuf>,
    /// Parent model directories; --train-each needs their weights.
    #[arg(long)]
    pub front_spec: Option<PathBuf>,
    #[arg(long)]
    pub back_spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub budgets: Option<Vec<u64>>,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub direction: Option<String>,
    /// Stitch and fine-tune every candidate and every selected plan.
    #[arg(long)]
    pub train_each: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub calib_samples: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Report {
    /// Finished finetune (or eval) output directories.
    #[arg(long, num_args = 1..)]
    pub runs: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Verify {
    pub dir: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Contract => 2,
        ErrorClass::Storage => 3,
        ErrorClass::Infeasible => 4,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV}={raw:?} must be a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error[config]: {msg}");
        return ExitCode::from(2);
    }
    match commands::dispatch(cli.command, cli.config.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
