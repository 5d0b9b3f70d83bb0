//! Rate/task training of the split model and evaluation with the real coder.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use optim::{adam_step, sgd_momentum_step, AdamState, OptimizerKind, SgdState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelConfig, QuantMode, SplitModel};
use crate::perturb::Perturbation;
use crate::pipeline::{evaluate_pipeline, Dataset, EvalOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the per-element rate in the loss.
    pub beta: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Momentum for SGD.
    pub momentum: f32,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs
    /// (never when `lr_step` is 0).
    pub lr_step: usize,
    pub lr_gamma: f32,
    /// Random horizontal flips of training images.
    pub augment: bool,
    pub beta_grid: Vec<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.08,
            lr: 2e-3,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            lr_step: 10,
            lr_gamma: 0.5,
            augment: false,
            beta_grid: vec![0.02, 0.08, 0.32, 1.28],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if self.beta_grid.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("beta grid entries must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_step {
            0 => self.lr,
            s => self.lr * self.lr_gamma.powi((epoch / s) as i32),
        }
    }
}

/// `CE(logits, labels) + β · mean(rate) / latent_elements`.
pub fn rd_task_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    rate_per_sample: Var,
    beta: f32,
    latent_elements: usize,
) -> Result<Var> {
    let ce = g.softmax_cross_entropy(logits, labels)?;
    if g.shape(rate_per_sample) != [labels.len()] {
        return Err(Error::shape(
            "rd_task_loss",
            format!("rate {:?} for {} labels", g.shape(rate_per_sample), labels.len()),
        ));
    }
    if beta == 0.0 {
        return Ok(ce);
    }
    let rate = g.mean(rate_per_sample);
    let scaled = g.affine(rate, beta / latent_elements.max(1) as f32, 0.0);
    g.add(ce, scaled)
}

/// Training statistics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub cross_entropy: f64,
    /// Mean estimated bits per sample under the noise surrogate.
    pub rate_bits: f64,
    pub train_accuracy_pct: f64,
}

enum OptState {
    Adam(AdamState),
    Sgd(SgdState),
}

fn flip_horizontal(x: &mut [f32], w: usize) {
    for row in x.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Trains a fresh model. `on_epoch` observes every epoch's statistics.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let model_config = ModelConfig { beta: cfg.beta.max(f32::MIN_POSITIVE), ..model_config.clone() };
    let mut model = SplitModel::new(model_config, cfg.seed)?;
    let latent_elements = model.config().latent_len();
    let mut state = match cfg.optimizer {
        OptimizerKind::Adam => OptState::Adam(AdamState::new(model.params())),
        OptimizerKind::SgdMomentum => OptState::Sgd(SgdState::new(model.params())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_5EED);
    let [_, _, w] = data.shape();
    let mut step: usize = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut rate_sum, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let x = if cfg.augment {
                let mut v = x.to_vec();
                for img in v.chunks_exact_mut(x.len() / chunk.len()) {
                    if rand::Rng::random::<bool>(&mut rng) {
                        flip_horizontal(img, w);
                    }
                }
                Tensor::new(x.shape(), v)?
            } else {
                x
            };
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let xv = g.constant(&x);
            let noise_seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step as u64;
            let out = model.forward(&mut g, &p, xv, QuantMode::Noisy { seed: noise_seed })?;
            let loss = rd_task_loss(&mut g, out.logits, &labels, out.rate.per_sample, cfg.beta, latent_elements)?;
            let loss_v = g.item_f64(loss)?;
            let rate_v = g.value(out.rate.per_sample).iter().map(|&r| r as f64).sum::<f64>() / labels.len() as f64;
            if !loss_v.is_finite() {
                return Err(Error::NonFinite { step, detail: format!("loss {loss_v}, mean rate {rate_v} bits") });
            }
            g.backward(loss)?;
            let grads = model.params().grads(&g, &p);
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, gr)| gr.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("gradient of {} is not finite", model.params().name(i)),
                });
            }
            let preds = argmax_rows(g.value(out.logits), model.config().num_classes);
            correct += preds.iter().zip(&labels).filter(|(a, b)| a == b).count();
            seen += labels.len();
            let ce = g.softmax_cross_entropy(out.logits, &labels)?;
            ce_sum += g.item_f64(ce)? * labels.len() as f64;
            loss_sum += loss_v * labels.len() as f64;
            rate_sum += rate_v * labels.len() as f64;
            match &mut state {
                OptState::Adam(s) => adam_step(model.params_mut(), &grads, s, lr, (0.9, 0.999), 1e-8)?,
                OptState::Sgd(s) => sgd_momentum_step(model.params_mut(), &grads, s, lr, cfg.momentum)?,
            }
            step += 1;
        }
        let n = seen.max(1) as f64;
        on_epoch(&EpochLog {
            epoch,
            lr,
            loss: loss_sum / n,
            cross_entropy: ce_sum / n,
            rate_bits: rate_sum / n,
            train_accuracy_pct: 100.0 * correct as f64 / n,
        });
    }
    Ok(Checkpoint::new(model, Some(cfg.clone()), None))
}

/// Accuracy and coded-size statistics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy_pct: f64,
    /// Mean total bitstream size (header included) in kB of 1000 bytes.
    pub size_kb_mean: f64,
    pub size_kb_std: f64,
    pub payload_kb_mean: f64,
    /// Mean estimated rate of the rounded latent, in bits.
    pub est_bits_mean: f64,
    /// Mean coded payload, in bits.
    pub coded_bits_mean: f64,
    pub latency_s_mean: f64,
}

impl Metrics {
    /// Aggregates per-sample predictions and stream sizes.
    pub fn from_samples(
        predictions: &[usize],
        labels: &[usize],
        sizes_bytes: &[usize],
        payload_bytes: &[usize],
        est_bits: &[f64],
        latencies: &[f64],
    ) -> Self {
        let n = predictions.len();
        let nf = n.max(1) as f64;
        let correct = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
        let kb: Vec<f64> = sizes_bytes.iter().map(|&s| s as f64 / 1000.0).collect();
        let mean = kb.iter().sum::<f64>() / nf;
        let var = kb.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / nf;
        Metrics {
            samples: n,
            accuracy_pct: 100.0 * correct as f64 / nf,
            size_kb_mean: mean,
            size_kb_std: var.sqrt(),
            payload_kb_mean: payload_bytes.iter().map(|&s| s as f64 / 1000.0).sum::<f64>() / nf,
            est_bits_mean: est_bits.iter().sum::<f64>() / nf,
            coded_bits_mean: payload_bytes.iter().map(|&s| s as f64 * 8.0).sum::<f64>() / nf,
            latency_s_mean: latencies.iter().sum::<f64>() / nf,
        }
    }
}

/// Evaluates `model` on `data` with the real coder in the loop, optionally
/// perturbing each batch before the head.
pub fn evaluate(
    model: &SplitModel,
    data: &Dataset,
    perturbation: Option<&Perturbation>,
    opts: &EvalOptions,
) -> Result<Metrics> {
    evaluate_pipeline(model, data, perturbation, None, opts)
}
