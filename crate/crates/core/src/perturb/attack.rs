use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dct::lowfreq_filter_gradient;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{PriorOutput, QuantMode, SplitModel};

/// What the attack maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Classification cross-entropy.
    Accuracy,
    /// Estimated code length of the latent.
    Entropy,
}

/// How the entropy loss passes through quantization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyPath {
    /// Rounding with a straight-through gradient.
    #[default]
    Ste,
    /// Training-time additive noise, fresh each step.
    Noise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradFilter {
    #[default]
    None,
    /// Keep DCT coefficients with `u + v < cutoff` before taking the sign.
    Lowfreq { cutoff: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    #[default]
    None,
    /// Weight each element's bits by `1 - p`, see [`regional_entropy_loss`].
    Regional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub loss_kind: LossKind,
    /// l∞ radius in pixel units.
    pub epsilon: f32,
    /// Step size as a fraction of `epsilon`; `None` means `2.5 / steps`.
    #[serde(default)]
    pub alpha: Option<f32>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub grad_filter: GradFilter,
    #[serde(default)]
    pub loss_mask: LossMask,
    #[serde(default)]
    pub entropy_path: EntropyPath,
    /// Start from a uniform random point of the ball.
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    20
}

impl AttackSpec {
    pub fn new(loss_kind: LossKind, epsilon: f32) -> Self {
        AttackSpec {
            loss_kind,
            epsilon,
            alpha: None,
            steps: default_steps(),
            grad_filter: GradFilter::None,
            loss_mask: LossMask::None,
            entropy_path: EntropyPath::Ste,
            random_start: false,
            seed: 0,
        }
    }

    /// Step fraction actually used.
    pub fn step_fraction(&self) -> f32 {
        self.alpha.unwrap_or(if self.steps == 0 { 1.0 } else { (2.5 / self.steps as f32).min(1.0) })
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.step_fraction();
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {a}")));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if self.loss_mask == LossMask::Regional && self.loss_kind != LossKind::Entropy {
            return Err(Error::Config("the regional mask applies to the entropy loss only".into()));
        }
        Ok(())
    }
}

/// Adversarial batch and the loss at every iterate, including the last.
#[derive(Clone, Debug)]
pub struct PgdOutput {
    pub x: Tensor,
    pub trace: Vec<f64>,
}

/// `Σ (1 - p) · (-log2 p)` over all likelihood elements of `prior`, with the
/// mask `1 - p` detached from the gradient.
pub fn regional_entropy_loss(g: &mut Graph, prior: &PriorOutput) -> Result<Var> {
    let mut terms = vec![prior.z_likelihood];
    terms.extend(prior.h_likelihood);
    let mut total: Option<Var> = None;
    for p in terms {
        let mask = g.detach(p);
        let mask = g.affine(mask, -1.0, 1.0);
        let ln = g.log(p)?;
        let bits = g.affine(ln, -std::f32::consts::LOG2_E, 0.0);
        let weighted = g.mul(mask, bits)?;
        let s = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least the main latent"))
}

fn attack_loss(g: &mut Graph, model: &SplitModel, x: Var, labels: &[usize], spec: &AttackSpec, step: usize) -> Result<Var> {
    let p = model.bind(g, false);
    match spec.loss_kind {
        LossKind::Accuracy => {
            let out = model.forward(g, &p, x, QuantMode::Rounded)?;
            let ce = g.softmax_cross_entropy(out.logits, labels)?;
            Ok(g.affine(ce, labels.len() as f32, 0.0))
        }
        LossKind::Entropy => {
            let mode = match spec.entropy_path {
                EntropyPath::Ste => QuantMode::Rounded,
                EntropyPath::Noise => QuantMode::Noisy { seed: spec.seed ^ (step as u64).wrapping_mul(0x9E37_79B9) },
            };
            let (_, prior) = model.encode_forward(g, &p, x, mode)?;
            match spec.loss_mask {
                LossMask::None => Ok(prior.rate(g)?.total),
                LossMask::Regional => regional_entropy_loss(g, &prior),
            }
        }
    }
}

/// Value of the attack objective at `x` (no gradient).
pub fn attack_objective(model: &SplitModel, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let l = attack_loss(&mut g, model, xv, labels, spec, spec.steps)?;
    g.item_f64(l)
}

fn project(v: f32, x0: f32, eps: f32) -> f32 {
    v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0)
}

/// Projected gradient ascent inside the l∞ ball of radius ε around `x`,
/// intersected with `[0, 1]`.
pub fn pgd(x: &Tensor, labels: &[usize], model: &SplitModel, spec: &AttackSpec) -> Result<PgdOutput> {
    spec.validate()?;
    if x.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("pgd", format!("{} labels for batch {:?}", labels.len(), x.shape())));
    }
    let eps = spec.epsilon;
    let step = spec.step_fraction() * eps;
    let x0 = x.data();
    let mut cur: Vec<f32> = if spec.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        x0.iter().map(|&v| project(v + rng.random_range(-eps..=eps), v, eps)).collect()
    } else {
        x0.to_vec()
    };
    let mut trace = Vec::with_capacity(spec.steps + 1);
    for i in 0..spec.steps {
        let mut g = Graph::new();
        let xv = g.leaf(&Tensor::new(x.shape(), cur.clone())?.with_requires_grad(true));
        let loss = attack_loss(&mut g, model, xv, labels, spec, i)?;
        trace.push(g.item_f64(loss)?);
        g.backward(loss)?;
        let grad = Tensor::new(x.shape(), g.grad(xv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; cur.len()]))?;
        let grad = match spec.grad_filter {
            GradFilter::None => grad,
            GradFilter::Lowfreq { cutoff } => lowfreq_filter_gradient(&grad, cutoff)?,
        };
        for ((c, &g), &o) in cur.iter_mut().zip(grad.data()).zip(x0) {
            let s = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
            *c = project(*c + step * s, o, eps);
        }
    }
    let out = Tensor::new(x.shape(), cur)?;
    if spec.steps > 0 {
        trace.push(attack_objective(model, &out, labels, spec)?);
    }
    Ok(PgdOutput { x: out, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{rate_bits, ModelConfig, PriorKind};

    fn tiny(prior: PriorKind) -> SplitModel {
        let cfg = ModelConfig {
            input_shape: [3, 8, 8],
            latent_channels: 4,
            latent_downsample: 2,
            head_width: 4,
            tail_width: 6,
            hyper_channels: 3,
            prior_kind: prior,
            ..ModelConfig::default()
        };
        SplitModel::new(cfg, 3).unwrap()
    }

    fn batch() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random())
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = tiny(PriorKind::Fp);
        let x = batch();
        let spec = AttackSpec { steps: 0, ..AttackSpec::new(LossKind::Entropy, 8.0 / 255.0) };
        let out = pgd(&x, &[0, 1], &m, &spec).unwrap();
        assert_eq!(out.x, x);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn stays_in_ball() {
        let x = batch();
        for prior in [PriorKind::Fp, PriorKind::Mshp] {
            let m = tiny(prior);
            for spec in [
                AttackSpec { steps: 3, ..AttackSpec::new(LossKind::Accuracy, 4.0 / 255.0) },
                AttackSpec { steps: 3, random_start: true, seed: 4, ..AttackSpec::new(LossKind::Entropy, 8.0 / 255.0) },
                AttackSpec {
                    steps: 2,
                    grad_filter: GradFilter::Lowfreq { cutoff: 2 },
                    loss_mask: LossMask::Regional,
                    ..AttackSpec::new(LossKind::Entropy, 16.0 / 255.0)
                },
            ] {
                let out = pgd(&x, &[3, 7], &m, &spec).unwrap();
                assert_eq!(out.trace.len(), spec.steps + 1);
                for (a, b) in out.x.data().iter().zip(x.data()) {
                    assert!((a - b).abs() <= spec.epsilon + 1e-6);
                    assert!((0.0..=1.0).contains(a));
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let m = tiny(PriorKind::Fp);
        let x = batch();
        let bad = [
            AttackSpec::new(LossKind::Entropy, 0.0),
            AttackSpec { alpha: Some(1.5), ..AttackSpec::new(LossKind::Entropy, 0.1) },
            AttackSpec { loss_mask: LossMask::Regional, ..AttackSpec::new(LossKind::Accuracy, 0.1) },
        ];
        for spec in bad {
            assert!(pgd(&x, &[0, 0], &m, &spec).is_err());
        }
        assert!(pgd(&x, &[0], &m, &AttackSpec::new(LossKind::Entropy, 0.1)).is_err());
    }

    #[test]
    fn regional_loss_limits() {
        let mut g = Graph::new();
        let certain = g.constant(&Tensor::full(&[1, 2, 2, 2], 1.0));
        let prior = PriorOutput {
            z_hat: certain,
            z_likelihood: certain,
            h_hat: None,
            h_likelihood: None,
            mean: None,
            scale: None,
            residual: None,
        };
        let l = regional_entropy_loss(&mut g, &prior).unwrap();
        assert_eq!(g.item(l).unwrap(), 0.0);

        let tiny_p = g.constant(&Tensor::full(&[1, 2, 2, 2], 1e-9));
        let prior = PriorOutput { z_likelihood: tiny_p, ..prior };
        let regional = regional_entropy_loss(&mut g, &prior).unwrap();
        let plain = rate_bits(&mut g, tiny_p, None).unwrap().total;
        let (r, p) = (g.item(regional).unwrap(), g.item(plain).unwrap());
        assert!((r - p).abs() / p < 1e-6);
    }

    #[test]
    fn default_alpha() {
        let s = AttackSpec::new(LossKind::Entropy, 0.1);
        assert!((s.step_fraction() - 0.125).abs() < 1e-7);
    }
}
