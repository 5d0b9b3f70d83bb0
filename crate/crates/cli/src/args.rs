use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use entres_core::model::PriorKind;
use entres_core::perturb::CorruptionKind;
use entres_core::pipeline::Split;
use entres_core::train::OptimizerKind;

#[derive(Debug, Parser)]
#[command(name = "entres", version, about = "Split classifier with an entropy bottleneck: training, coding, attacks and defenses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset in the CIFAR-10 binary format.
    Synth(SynthArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on clean data.
    Eval(EvalArgs),
    /// Evaluate under a PGD attack.
    Attack(PerturbedArgs),
    /// Evaluate under a common corruption.
    Corrupt(PerturbedArgs),
    /// Evaluate with TV denoising, optionally after an attack or corruption.
    Defend(DefendArgs),
    /// Render bit-rate, TV and attack comparison maps.
    Maps(MapsArgs),
    /// Run an experiment grid from a JSON spec.
    Grid(GridArgs),
    /// Run the randomized coder self-test.
    CodecSelftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic-data config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON with optional `model` and `train` sections; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CIFAR-10 binary file or directory (training split is used).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub prior: Option<PriorKind>,
    #[arg(long)]
    pub beta: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub augment: bool,
    /// Use only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct ExperimentArgs {
    /// JSON experiment config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Evaluate only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Link bandwidth in bytes per second.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Link round-trip time in seconds.
    #[arg(long)]
    pub rtt: Option<f64>,
    /// Results CSV the row is appended to.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Row id in the results CSV.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct PerturbArgs {
    /// PGD loss: `accuracy` or `entropy`.
    #[arg(long, value_parser = ["accuracy", "entropy"])]
    pub attack: Option<String>,
    /// l∞ radius, e.g. `8/255` or `0.03`.
    #[arg(long, value_parser = parse_fraction)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step size as a fraction of epsilon (default 2.5 / steps).
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Keep only DCT frequencies with u + v below this cutoff in the gradient.
    #[arg(long)]
    pub lowfreq: Option<usize>,
    /// Weight the entropy loss by one minus the likelihood.
    #[arg(long)]
    pub regional: bool,
    /// Differentiate the entropy loss through additive noise instead of rounding.
    #[arg(long)]
    pub noise_path: bool,
    #[arg(long)]
    pub random_start: bool,
    #[arg(long, value_parser = parse_corruption)]
    pub corruption: Option<CorruptionKind>,
    #[arg(long)]
    pub severity: Option<u8>,
    /// Uniform random noise of this radius instead of an attack.
    #[arg(long, value_parser = parse_fraction)]
    pub noise: Option<f32>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DefenseArgs {
    /// TV smoothing weight.
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Denoising step size.
    #[arg(long)]
    pub tv_alpha: Option<f32>,
    #[arg(long)]
    pub tv_steps: Option<usize>,
    /// Denoise every pixel equally instead of using the prior's soft mask.
    #[arg(long)]
    pub no_mask: bool,
    /// Reduce latent likelihoods with the minimum over channels.
    #[arg(long)]
    pub mask_min: bool,
    /// Nearest-neighbour mask upsampling.
    #[arg(long)]
    pub nearest: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct PerturbedArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[command(flatten)]
    pub perturb: PerturbArgs,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[command(flatten)]
    pub perturb: PerturbArgs,
    #[command(flatten)]
    pub defense: DefenseArgs,
}

#[derive(Debug, Args)]
pub struct MapsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_parser = parse_fraction)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// JSON grid spec.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the spec's output CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 2000)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Accepts `a/b` or a plain number.
pub fn parse_fraction(s: &str) -> Result<f32, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f32 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
            let b: f32 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not a finite number"))
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (train or test)")),
    }
}

fn parse_corruption(s: &str) -> Result<CorruptionKind, String> {
    s.parse().map_err(|e: entres_core::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
        _ => Err(format!("unknown optimizer '{s}' (adam or sgd)")),
    }
}
