//! `misf` command-line tool.

mod error;
mod eval;
mod gradcheck;
mod infer;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "misf", version, about = "Predictive-filtering image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Fill the holes of one image with a trained checkpoint.
    Inpaint(InpaintArgs),
    /// Score completed images against ground truth.
    Eval(EvalArgs),
    /// Write seeded free-form masks of one hole-ratio bucket.
    MaskGen(MaskGenArgs),
    /// Finite-difference check of every registered gradient.
    Gradcheck(GradcheckArgs),
    /// Cross-correlation of corrupted and clean features before and after
    /// semantic filtering.
    FeatureSim(FeatureSimArgs),
    /// Apply the model to its own output repeatedly and save every frame.
    DemoRecurrent(RecurrentArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics.csv, config.txt and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total number of optimizer steps.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Dataset manifest; fixtures are used when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of MTF1 weights for the loss feature extractor.
    #[arg(long)]
    pub fx_weights: Option<PathBuf>,
    /// Average the L1 term over hole pixels only.
    #[arg(long)]
    pub masked_l1: bool,
    /// Write a checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corrupted or clean RGB image (PNG or PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Hole mask, white = hole.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the predicted kernel fields as MTF1 files into this directory.
    #[arg(long)]
    pub dump_kernels: Option<PathBuf>,
    /// Write every intermediate feature map as MTF1 files into this directory.
    #[arg(long)]
    pub dump_features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of completed images.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory of ground-truth images with matching file stems.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory of masks with matching file stems.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write JSON instead of CSV.
    #[arg(long)]
    pub json: bool,
    /// Label stored in the variant column.
    #[arg(long, default_value = "unknown")]
    pub variant: String,
}

#[derive(Args, Debug)]
pub struct MaskGenArgs {
    /// 0-20, 20-40 or 40-60.
    #[arg(long)]
    pub bucket: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Mask side length in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Coordinates sampled per check, 0 for all.
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    pub only: Option<String>,
    /// Print the registered check names and exit.
    #[arg(long)]
    pub list: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct FeatureSimArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Ground-truth image; the corrupted input is derived from the mask.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct RecurrentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Ground-truth image; the corrupted input is derived from the mask.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub iters: usize,
    /// Directory for frame_NNN.png and fill.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace predicted kernels by identity kernels.
    #[arg(long)]
    pub delta: bool,
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Inpaint(a) => infer::inpaint(a),
        Command::Eval(a) => eval::eval(a),
        Command::MaskGen(a) => eval::mask_gen(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::FeatureSim(a) => infer::feature_sim(a),
        Command::DemoRecurrent(a) => infer::demo_recurrent(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::EXIT_CONFIG as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
