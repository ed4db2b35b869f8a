mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::parse_override;

/// Nucleus and gland segmentation with a quick-attention encoder-decoder.
#[derive(Parser, Debug)]
#[command(name = "histoseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image/mask dataset with a split manifest.
    Synth(SynthArgs),
    /// Cut image/mask pairs into fixed-size patches.
    Patch(PatchArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Segment one image with a trained model.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print per-layer multiply-add counts.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Side length; must be divisible by 8.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.2, 0.1])]
    pub fractions: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct PatchArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
}

/// Configuration flags shared by commands that resolve a run config.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.loss.gamma=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (`data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `train.epochs`
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `train.learning_rate`
    #[arg(long)]
    pub lr: Option<f64>,
    /// `train.batch_size`
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// `network.width_multiplier`
    #[arg(long)]
    pub width: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the 8-bit probability map instead of the binary mask.
    #[arg(long)]
    pub prob: bool,
    /// Run configuration holding the network spec. Defaults to the
    /// `resolved-config.json` next to the model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the results as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Patch(a) => commands::patch(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Flops(a) => commands::flops(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
