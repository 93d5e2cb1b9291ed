//! `gad`: evaluate group activity predictions, inspect datasets, and train
//! or run the reference model on desk-scale data.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gad", version, about = "Group activity detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against annotations (Group mAP, Outlier mIoU).
    Evaluate(EvaluateArgs),
    /// Dataset statistics and histograms.
    Stats(StatsArgs),
    /// Train the reference model on a small dataset and report train metrics.
    TrainToy(TrainArgs),
    /// Run a trained checkpoint and write predictions.
    Infer(InferArgs),
    /// Spectral-clustering baseline predictions.
    Baseline(BaselineArgs),
    /// Generate a synthetic dataset and matching features.
    Synth(SynthArgs),
    /// Finite-difference check of the model and loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct LoadArgs {
    /// Accept single-member groups (with a warning).
    #[arg(long)]
    allow_singleton_groups: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Group IoU thresholds; repeat for several.
    #[arg(long = "theta", default_values_t = [1.0, 0.5])]
    thetas: Vec<f64>,
    /// Treat outliers as singleton groups of an extra class.
    #[arg(long)]
    outliers_as_singletons: bool,
    /// Also write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Directory for histogram CSV files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Group tokens.
    #[arg(long, default_value_t = 12)]
    k_tokens: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    /// Distance-mask threshold in normalized frame units.
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    /// Disable the actor distance mask.
    #[arg(long)]
    no_distance_mask: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset JSON; a synthetic toy set is generated when omitted.
    #[arg(long, requires = "features")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    features: Option<PathBuf>,
    /// Classes of the toy set (ignored with --dataset).
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Peak learning rate; warmup starts at a tenth of it.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 5.0)]
    lambda_mem: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda_con: f64,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    /// Where to write the trained parameters.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    #[arg(long)]
    no_distance_mask: bool,
    /// Keep groups that end up with a single member.
    #[arg(long)]
    keep_singletons: bool,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AffinityArg {
    Cosine,
    Rbf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Required for cosine affinity.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Clusters per clip (capped at the clip's actor count).
    #[arg(long = "k-clusters", alias = "k", default_value_t = 2)]
    k_clusters: usize,
    #[arg(long, value_enum, default_value_t = AffinityArg::Rbf)]
    affinity: AffinityArg,
    /// RBF bandwidth in normalized frame units.
    #[arg(long, default_value_t = 0.1)]
    bandwidth: f64,
    /// Activity classes assigned uniform scores.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dataset: PathBuf,
    #[arg(long)]
    out_features: PathBuf,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    min_actors: usize,
    #[arg(long, default_value_t = 10)]
    max_actors: usize,
    #[arg(long, default_value_t = 2)]
    min_groups: usize,
    #[arg(long, default_value_t = 2)]
    max_groups: usize,
    #[arg(long, default_value_t = 0.3)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    tightness: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Feature frames per clip.
    #[arg(long, default_value_t = 2)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Stats(a) => commands::stats(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Infer(a) => commands::infer(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Synth(a) => commands::synth(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
