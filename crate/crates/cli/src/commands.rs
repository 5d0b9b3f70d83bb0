use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use entres_core::coder::self_test;
use entres_core::defense::{DenoiseSpec, Interpolation, MaskMode, MaskReduction};
use entres_core::model::ModelConfig;
use entres_core::perturb::{AttackSpec, CorruptionSpec, EntropyPath, GradFilter, LossKind, LossMask, Perturbation};
use entres_core::pipeline::{
    append_results, load_dataset, render_maps, run_grid, write_synthetic, ExperimentConfig, GridSpec, MapOptions,
    Resources, ResultRow, Split, SynthConfig,
};
use entres_core::train::{train, TrainConfig};
use entres_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{
    Command, DefendArgs, DefenseArgs, EvalArgs, ExperimentArgs, GridArgs, MapsArgs, PerturbArgs, PerturbedArgs,
    SelftestArgs, SynthArgs, TrainArgs,
};

/// Invalid command-line input detected after parsing.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Whether `e` stems from bad input rather than a failed run.
pub fn is_validation_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Invalid>()
            || c.is::<serde_json::Error>()
            || matches!(
                c.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Json(_) | Error::Shape { .. } | Error::Label { .. } | Error::Param(_))
            )
    })
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Attack(a) => perturbed(a, Kind::Attack),
        Command::Corrupt(a) => perturbed(a, Kind::Corruption),
        Command::Defend(a) => defend(a),
        Command::Maps(a) => maps(a),
        Command::Grid(a) => grid(a),
        Command::CodecSelftest(a) => selftest(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.train = a.train.unwrap_or(cfg.train);
    cfg.test = a.test.unwrap_or(cfg.test);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    write_synthetic(&a.out, &cfg)?;
    println!("wrote {} training and {} test images to {}", cfg.train, cfg.test, a.out.display());
    Ok(())
}

/// Contents of `train --config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let TrainFile { mut model, train: mut cfg } = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    model.prior_kind = a.prior.unwrap_or(model.prior_kind);
    cfg.beta = a.beta.unwrap_or(cfg.beta);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.optimizer = a.optimizer.unwrap_or(cfg.optimizer);
    cfg.augment |= a.augment;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    model.validate()?;
    cfg.validate()?;
    let mut data = load_dataset(&a.dataset, Split::Train)?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    let start = Instant::now();
    let ck = train(&model, &cfg, &data, |e| {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  ce {:.4}  rate {:.1} bits  train acc {:.2}%  ({:.0}s)",
            e.epoch + 1,
            e.lr,
            e.loss,
            e.cross_entropy,
            e.rate_bits,
            e.train_accuracy_pct,
            start.elapsed().as_secs_f64()
        )
    })?;
    ck.save(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn experiment(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => {
            let ck = a.checkpoint.clone().ok_or_else(|| invalid("--checkpoint is required without --config"))?;
            let ds = a.dataset.clone().ok_or_else(|| invalid("--dataset is required without --config"))?;
            ExperimentConfig::new(ck, ds)
        }
    };
    if let Some(p) = &a.checkpoint {
        cfg.checkpoint = p.clone();
    }
    if let Some(p) = &a.dataset {
        cfg.dataset = p.clone();
    }
    cfg.split = a.split.unwrap_or(cfg.split);
    cfg.sample_limit = a.limit.or(cfg.sample_limit);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.link.bandwidth_bytes_per_s = a.bandwidth.unwrap_or(cfg.link.bandwidth_bytes_per_s);
    cfg.link.rtt_s = a.rtt.unwrap_or(cfg.link.rtt_s);
    cfg.output = a.output.clone().or(cfg.output);
    cfg.id = a.id.clone().or(cfg.id);
    Ok(cfg)
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Attack,
    Corruption,
    Any,
}

fn perturbation(a: &PerturbArgs, base: Option<Perturbation>, kind: Kind) -> Result<Option<Perturbation>> {
    let chosen = [a.attack.is_some(), a.corruption.is_some(), a.noise.is_some()].iter().filter(|&&b| b).count();
    if chosen > 1 {
        return Err(invalid("choose one of --attack, --corruption and --noise"));
    }
    let p = if let Some(loss) = &a.attack {
        let loss = if loss == "accuracy" { LossKind::Accuracy } else { LossKind::Entropy };
        let eps = a.epsilon.ok_or_else(|| invalid("--attack needs --epsilon"))?;
        let mut spec = AttackSpec::new(loss, eps);
        spec.steps = a.steps.unwrap_or(spec.steps);
        spec.alpha = a.alpha;
        spec.grad_filter = a.lowfreq.map_or(GradFilter::None, |cutoff| GradFilter::Lowfreq { cutoff });
        spec.loss_mask = if a.regional { LossMask::Regional } else { LossMask::None };
        spec.entropy_path = if a.noise_path { EntropyPath::Noise } else { EntropyPath::Ste };
        spec.random_start = a.random_start;
        Some(Perturbation::Attack(spec))
    } else if let Some(k) = a.corruption {
        let s = a.severity.ok_or_else(|| invalid("--corruption needs --severity"))?;
        Some(Perturbation::Corruption(CorruptionSpec::new(k, s, 0)))
    } else if let Some(eps) = a.noise {
        Some(Perturbation::RandomNoise { epsilon: eps, seed: 0 })
    } else {
        base
    };
    let ok = match (kind, &p) {
        (Kind::Attack, Some(Perturbation::Attack(_))) | (Kind::Corruption, Some(Perturbation::Corruption(_))) => true,
        (Kind::Any, _) => true,
        _ => false,
    };
    if !ok {
        return Err(invalid(match kind {
            Kind::Attack => "attack needs --attack accuracy|entropy and --epsilon",
            _ => "corrupt needs --corruption KIND and --severity 1..5",
        }));
    }
    if let Some(p) = &p {
        p.validate()?;
    }
    Ok(p)
}

fn defense(a: &DefenseArgs, base: Option<DenoiseSpec>) -> DenoiseSpec {
    let mut d = base.unwrap_or_default();
    d.lambda = a.lambda.unwrap_or(d.lambda);
    d.alpha = a.tv_alpha.unwrap_or(d.alpha);
    d.steps = a.tv_steps.unwrap_or(d.steps);
    if a.no_mask {
        d.mask_mode = MaskMode::None;
    }
    if a.mask_min {
        d.reduction = MaskReduction::Min;
    }
    if a.nearest {
        d.interpolation = Interpolation::Nearest;
    }
    d
}

fn print_row(row: &ResultRow) {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}  acc {}%  size {} kB (std {})  est {} bits  latency {} s{}",
        row.config_id,
        f(row.acc_pct),
        f(row.size_kb_mean),
        f(row.size_kb_std),
        f(row.est_bits_mean),
        f(row.latency_s_mean),
        if row.is_ok() { String::new() } else { format!("  error: {}", row.error) }
    );
}

/// Evaluates one experiment, prints its metrics and appends its row.
fn evaluate_one(cfg: ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let start = Instant::now();
    let metrics = Resources::default().evaluate(&cfg)?;
    let row = ResultRow::from_metrics(&cfg, &metrics, start.elapsed().as_secs_f64());
    println!("{}", serde_json::to_string(&metrics)?);
    print_row(&row);
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("results.csv"));
    append_results(&out, &[row])?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    evaluate_one(experiment(&a.exp)?)
}

fn perturbed(a: PerturbedArgs, kind: Kind) -> Result<()> {
    let mut cfg = experiment(&a.exp)?;
    cfg.perturbation = perturbation(&a.perturb, cfg.perturbation, kind)?;
    evaluate_one(cfg)
}

fn defend(a: DefendArgs) -> Result<()> {
    let mut cfg = experiment(&a.exp)?;
    cfg.perturbation = perturbation(&a.perturb, cfg.perturbation, Kind::Any)?;
    cfg.defense = Some(defense(&a.defense, cfg.defense));
    evaluate_one(cfg)
}

fn maps(a: MapsArgs) -> Result<()> {
    let mut opts = MapOptions::default();
    opts.count = a.count.unwrap_or(opts.count);
    opts.epsilon = a.epsilon.unwrap_or(opts.epsilon);
    opts.steps = a.steps.unwrap_or(opts.steps);
    opts.seed = a.seed.unwrap_or(opts.seed);
    let mut res = Resources::default();
    let data = res.dataset(&a.dataset, a.split)?.clone();
    let model = res.model(&a.checkpoint)?;
    let summary = render_maps(model, &data, &opts, &a.out)?;
    println!("wrote {} files to {}", summary.files.len(), a.out.display());
    match summary.mean_correlation() {
        Some(r) => println!("mean TV/bit-rate correlation {r:.4} over {} images", summary.correlations.len()),
        None => println!("TV/bit-rate correlation undefined (constant maps)"),
    }
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let mut spec: GridSpec = read_json(&a.config)?;
    if let Some(o) = a.output {
        spec.output = o;
    }
    spec.sample_limit = a.limit.or(spec.sample_limit);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let cells = spec.cells();
    let rows = run_grid(&cells, &spec.output, &mut Resources::default(), print_row)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    println!(
        "{} new rows ({} failed, {} already present) in {}",
        rows.len(),
        failed,
        cells.len() - rows.len(),
        spec.output.display()
    );
    Ok(())
}

fn selftest(a: SelftestArgs) -> Result<()> {
    let r = self_test(a.cases, a.seed)?;
    println!(
        "codec self-test passed: {} streams, {} symbols, {:.1} payload bits vs {:.1} ideal, max overhead {:.1} bits, {} corruptions caught",
        r.cases, r.symbols, r.payload_bits, r.table_bits, r.max_overhead_bits, r.corruptions_caught
    );
    Ok(())
}
