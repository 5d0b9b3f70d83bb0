//! Input-space interference: parametrized corruptions, a random-noise
//! baseline and PGD attacks on accuracy or on the coded size.

mod attack;
mod corrupt;
mod dct;

pub use attack::{
    attack_objective, pgd, regional_entropy_loss, AttackSpec, EntropyPath, GradFilter, LossKind, LossMask,
    PgdOutput,
};
pub use corrupt::{
    adjust_contrast, convolve, corrupt, disk_kernel, gaussian_kernel, impulse, line_kernel, random_noise_baseline,
    CorruptionKind, CorruptionSpec, Kernel,
};
pub use dct::{dct2, idct2, lowfreq_filter_gradient};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::model::SplitModel;

/// Any interference applied to images before the head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Perturbation {
    Corruption(CorruptionSpec),
    RandomNoise { epsilon: f32, seed: u64 },
    Attack(AttackSpec),
}

fn batch_seed(seed: u64, batch: u64) -> u64 {
    seed ^ batch.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Perturbation::Corruption(c) => c.validate(),
            Perturbation::RandomNoise { epsilon, .. } if !(0.0..1.0).contains(epsilon) => {
                Err(crate::Error::Config(format!("epsilon must be in [0, 1), got {epsilon}")))
            }
            Perturbation::RandomNoise { .. } => Ok(()),
            Perturbation::Attack(a) => a.validate(),
        }
    }

    /// Same perturbation with `seed` mixed into its own seed.
    pub fn reseeded(self, seed: u64) -> Self {
        let mix = |s: u64| s ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        match self {
            Perturbation::Corruption(c) => Perturbation::Corruption(CorruptionSpec { seed: mix(c.seed), ..c }),
            Perturbation::RandomNoise { epsilon, seed: s } => Perturbation::RandomNoise { epsilon, seed: mix(s) },
            Perturbation::Attack(a) => Perturbation::Attack(AttackSpec { seed: mix(a.seed), ..a }),
        }
    }

    /// Perturbs one batch; `batch` decorrelates the randomness of batches.
    pub fn apply(&self, model: &SplitModel, x: &Tensor, labels: &[usize], batch: u64) -> Result<Tensor> {
        match *self {
            Perturbation::Corruption(c) => corrupt(x, &CorruptionSpec { seed: batch_seed(c.seed, batch), ..c }),
            Perturbation::RandomNoise { epsilon, seed } => random_noise_baseline(x, epsilon, batch_seed(seed, batch)),
            Perturbation::Attack(a) => Ok(pgd(x, labels, model, &AttackSpec { seed: batch_seed(a.seed, batch), ..a })?.x),
        }
    }

    /// Short stable description, used as a CSV field.
    pub fn descriptor(&self) -> String {
        match self {
            Perturbation::Corruption(c) => format!("{}:s{}", c.kind, c.severity),
            Perturbation::RandomNoise { epsilon, .. } => format!("noise:eps{}", eps_label(*epsilon)),
            Perturbation::Attack(a) => {
                let mut s = match a.loss_kind {
                    LossKind::Accuracy => "pgd_acc".to_string(),
                    LossKind::Entropy => "pgd_e".to_string(),
                };
                s.push_str(&format!(":eps{}", eps_label(a.epsilon)));
                if let GradFilter::Lowfreq { cutoff } = a.grad_filter {
                    s.push_str(&format!(":lowfreq{cutoff}"));
                }
                if a.loss_mask == LossMask::Regional {
                    s.push_str(":regional");
                }
                if a.entropy_path == EntropyPath::Noise {
                    s.push_str(":noise_path");
                }
                s
            }
        }
    }
}

/// `8/255` style label when `eps` is a whole number of grey levels.
fn eps_label(eps: f32) -> String {
    let levels = eps * 255.0;
    if (levels - levels.round()).abs() < 1e-4 {
        format!("{}/255", levels.round() as i64)
    } else {
        format!("{eps}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors() {
        let a = Perturbation::Attack(AttackSpec {
            grad_filter: GradFilter::Lowfreq { cutoff: 8 },
            ..AttackSpec::new(LossKind::Entropy, 4.0 / 255.0)
        });
        assert_eq!(a.descriptor(), "pgd_e:eps4/255:lowfreq8");
        let c = Perturbation::Corruption(CorruptionSpec::new(CorruptionKind::ShotNoise, 3, 0));
        assert_eq!(c.descriptor(), "shot_noise:s3");
        assert_eq!(Perturbation::RandomNoise { epsilon: 0.01, seed: 0 }.descriptor(), "noise:eps0.01");
    }

    #[test]
    fn json_roundtrip() {
        let p = Perturbation::Attack(AttackSpec { loss_mask: LossMask::Regional, ..AttackSpec::new(LossKind::Entropy, 0.1) });
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Perturbation>(&s).unwrap(), p);
        let c: Perturbation =
            serde_json::from_str(r#"{"type":"corruption","kind":"defocus_blur","severity":5}"#).unwrap();
        assert_eq!(c, Perturbation::Corruption(CorruptionSpec::new(CorruptionKind::DefocusBlur, 5, 0)));
    }
}
