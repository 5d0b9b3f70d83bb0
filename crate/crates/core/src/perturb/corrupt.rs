use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    GlassBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::Contrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::Contrast => "contrast",
        }
    }

    /// Parameter used at `severity` (1..=5): noise std, photon count,
    /// impulse rate, disk radius, line length, displacement blur std or
    /// contrast factor.
    pub fn severity_value(self, severity: u8) -> Result<f32> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity must be 1..=5, got {severity}")));
        }
        let table: [f32; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::DefocusBlur => [0.75, 1.0, 1.5, 2.0, 2.5],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::GlassBlur => [0.4, 0.5, 0.6, 0.7, 0.9],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
        };
        Ok(table[severity as usize - 1])
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        CorruptionSpec { kind, severity, seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.severity_value(self.severity).map(|_| ())
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape("corrupt", format!("expected [N, C, H, W], got {:?}", x.shape()))),
    }
}

/// Applies a corruption to a batch of images in `[0, 1]`.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let v = spec.kind.severity_value(spec.severity)?;
    let (_, _, h, w) = image_dims(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out: Vec<f32> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0f32, v).expect("positive std");
            x.data().iter().map(|&p| p + n.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => x
            .data()
            .iter()
            .map(|&p| {
                let lambda = p.clamp(0.0, 1.0) as f64 * v as f64;
                match Poisson::new(lambda) {
                    Ok(d) => (d.sample(&mut rng) / v as f64) as f32,
                    Err(_) => 0.0,
                }
            })
            .collect(),
        CorruptionKind::ImpulseNoise => impulse(x.data(), v, &mut rng),
        CorruptionKind::DefocusBlur => convolve(x.data(), h, w, &disk_kernel(v)),
        CorruptionKind::MotionBlur => convolve(x.data(), h, w, &line_kernel(v as usize)),
        CorruptionKind::GlassBlur => glass(x.data(), h, w, v, &mut rng),
        CorruptionKind::Contrast => adjust_contrast(x.data(), x.len() / x.shape()[0].max(1), v),
    };
    Tensor::new(x.shape(), out.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
}

/// `(x - mean) · factor + mean` per image of `per_image` values.
pub fn adjust_contrast(x: &[f32], per_image: usize, factor: f32) -> Vec<f32> {
    let mut out = x.to_vec();
    for img in out.chunks_exact_mut(per_image.max(1)) {
        let mean = (img.iter().map(|&p| p as f64).sum::<f64>() / img.len() as f64) as f32;
        img.iter_mut().for_each(|p| *p = (*p - mean) * factor + mean);
    }
    out
}

/// Salt and pepper: every value is replaced with probability `rate`, by 0 or
/// 1 with equal odds.
pub fn impulse(x: &[f32], rate: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    x.iter()
        .map(|&p| {
            let hit = rng.random::<f32>() < rate;
            let salt = rng.random::<bool>();
            match (hit, salt) {
                (true, true) => 1.0,
                (true, false) => 0.0,
                _ => p,
            }
        })
        .collect()
}

/// Square kernel with odd side, `weights[dy * side + dx]`, summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub side: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    fn normalized(side: usize, mut weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Kernel { side, weights: weights.into_iter().map(|w| w as f32).collect() }
    }
}

/// Disk of `radius` pixels, each cell weighted by its covered area
/// (8 × 8 supersampling).
pub fn disk_kernel(radius: f32) -> Kernel {
    let half = radius.ceil().max(0.0) as i64;
    let side = (2 * half + 1) as usize;
    let r2 = (radius as f64).powi(2);
    let mut w = vec![0.0f64; side * side];
    for dy in -half..=half {
        for dx in -half..=half {
            let mut inside = 0;
            for sy in 0..8 {
                for sx in 0..8 {
                    let py = dy as f64 - 0.5 + (sy as f64 + 0.5) / 8.0;
                    let px = dx as f64 - 0.5 + (sx as f64 + 0.5) / 8.0;
                    inside += (px * px + py * py <= r2) as usize;
                }
            }
            w[((dy + half) as usize) * side + (dx + half) as usize] = inside as f64;
        }
    }
    if w.iter().all(|&v| v == 0.0) {
        w[side * side / 2] = 1.0;
    }
    Kernel::normalized(side, w)
}

/// Line of `length` samples through the centre at 45 degrees.
pub fn line_kernel(length: usize) -> Kernel {
    let length = length.max(1);
    let half = (length as f64 - 1.0) / 2.0;
    let reach = (half * std::f64::consts::FRAC_1_SQRT_2).round() as i64;
    let side = (2 * reach + 1) as usize;
    let mut w = vec![0.0f64; side * side];
    for i in 0..length {
        let t = i as f64 - half;
        let d = (t * std::f64::consts::FRAC_1_SQRT_2).round() as i64;
        w[((reach - d) as usize) * side + (d + reach) as usize] += 1.0;
    }
    Kernel::normalized(side, w)
}

/// Normalized Gaussian of standard deviation `sigma`, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Kernel {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let side = (2 * half + 1) as usize;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let mut w = vec![0.0f64; side * side];
    for dy in -half..=half {
        for dx in -half..=half {
            w[((dy + half) as usize) * side + (dx + half) as usize] = (-((dx * dx + dy * dy) as f64) / s2).exp();
        }
    }
    Kernel::normalized(side, w)
}

/// Mirror index without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Convolves every `h × w` plane with `k`, reflecting at the borders.
pub fn convolve(x: &[f32], h: usize, w: usize, k: &Kernel) -> Vec<f32> {
    let half = (k.side / 2) as i64;
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f64;
                for ky in 0..k.side {
                    let sy = reflect(y as i64 + ky as i64 - half, h);
                    for kx in 0..k.side {
                        let wt = k.weights[ky * k.side + kx];
                        if wt != 0.0 {
                            let sx = reflect(xx as i64 + kx as i64 - half, w);
                            acc += wt as f64 * src[sy * w + sx] as f64;
                        }
                    }
                }
                dst[y * w + xx] = acc as f32;
            }
        }
    }
    out
}

/// Blur, then swap every pixel with a random neighbour at most one step
/// away (the same offset for all channels), then blur again.
fn glass(x: &[f32], h: usize, w: usize, sigma: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let mut img = convolve(x, h, w, &k);
    let channels = x.len() / (h * w);
    let per_image = channels * h * w;
    for one in img.chunks_exact_mut(per_image.max(1)) {
        for y in (1..h.saturating_sub(1)).rev() {
            for xx in (1..w.saturating_sub(1)).rev() {
                let dy = rng.random_range(-1i64..=1);
                let dx = rng.random_range(-1i64..=1);
                let (sy, sx) = ((y as i64 + dy) as usize, (xx as i64 + dx) as usize);
                for c in 0..channels {
                    one.swap(c * h * w + y * w + xx, c * h * w + sy * w + sx);
                }
            }
        }
    }
    convolve(&img, h, w, &k)
}

/// `x + U(-ε, ε)`, clamped to `[0, 1]`.
pub fn random_noise_baseline(x: &Tensor, epsilon: f32, seed: u64) -> Result<Tensor> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = x
        .data()
        .iter()
        .map(|&p| (p + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape(), out)
}
