//! Seeded synthetic stand-in for CIFAR-10.
//!
//! Every image is a smooth two-colour gradient background with one object
//! (disk, square or diamond) at a random place. The object is filled with a
//! texture whose kind is the label, so classification depends on
//! high-frequency detail inside the object while the background carries
//! almost none. Files are written in the CIFAR-10 binary format.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, CIFAR_SHAPE};
use crate::error::Result;

pub const CLASS_NAMES: [&str; 10] = [
    "horizontal", "vertical", "diagonal", "antidiagonal", "checker", "rings", "crosshatch", "spokes",
    "waves", "dots",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Texture amplitude is drawn uniformly from this range.
    pub contrast: (f32, f32),
    /// Stripe period in pixels is drawn uniformly from this range.
    pub period: (f32, f32),
    /// Standard deviation of sensor-like noise added to every pixel.
    pub pixel_noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { train: 20_000, test: 2_000, seed: 2024, contrast: (0.12, 0.3), period: (3.0, 6.0), pixel_noise: 0.01 }
    }
}

/// Generates `n` images; image `i` depends only on `(seed, i)`.
pub fn generate(n: usize, seed: u64, cfg: &SynthConfig) -> Dataset {
    let [c, h, w] = CIFAR_SHAPE;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        images.extend(render(label, &mut rng, cfg));
        labels.push(label);
    }
    Dataset::new(CIFAR_SHAPE, images, labels).expect("generated sizes agree")
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(0.15..0.85))
}

fn render(label: u8, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f32> {
    let [_, h, w] = CIFAR_SHAPE;
    let (c0, c1) = (random_colour(rng), random_colour(rng));
    let theta: f32 = rng.random_range(0.0..2.0 * PI);
    let object = random_colour(rng);
    let shape_kind: u8 = rng.random_range(0..3);
    let (cx, cy): (f32, f32) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
    let radius: f32 = rng.random_range(7.0..11.0);
    let amp: f32 = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
    let period: f32 = rng.random_range(cfg.period.0..=cfg.period.1);
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0f32, cfg.pixel_noise.max(0.0)).expect("non-negative std");

    let k = 2.0 * PI / period;
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / (w - 1) as f32 * 2.0 - 1.0, y as f32 / (h - 1) as f32 * 2.0 - 1.0);
            let t = 0.5 + 0.25 * (theta.cos() * u + theta.sin() * v);
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let inside = match shape_kind {
                0 => dx * dx + dy * dy <= radius * radius,
                1 => dx.abs().max(dy.abs()) <= radius * 0.85,
                _ => dx.abs() + dy.abs() <= radius * 1.2,
            };
            let s = if inside { texture(label, k, phase, dx, dy) } else { 0.0 };
            for ch in 0..3 {
                let base = if inside { object[ch] } else { c0[ch] + (c1[ch] - c0[ch]) * t };
                let n = if cfg.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                out[ch * h * w + y * w + x] = (base + amp * s + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Texture value in `[-1, 1]` at offset `(dx, dy)` from the object centre.
fn texture(label: u8, k: f32, phase: f32, dx: f32, dy: f32) -> f32 {
    let d = std::f32::consts::FRAC_1_SQRT_2;
    match label {
        0 => (k * dy + phase).sin(),
        1 => (k * dx + phase).sin(),
        2 => (k * (dx + dy) * d + phase).sin(),
        3 => (k * (dx - dy) * d + phase).sin(),
        4 => (k * dx + phase).sin() * (k * dy + phase).sin() * 1.5,
        5 => (k * (dx * dx + dy * dy).sqrt() + phase).sin(),
        6 => (k * dx + phase).sin().max((k * dy + phase).sin()),
        7 => (6.0 * dy.atan2(dx) + phase).sin(),
        8 => (k * dy + phase + 1.5 * (0.5 * k * dx).sin()).sin(),
        _ => ((k * dx + phase).cos() * (k * dy + phase).cos() * 4.0 - 1.0).min(1.0),
    }
    .clamp(-1.0, 1.0)
}

/// Writes `data_batch_1.bin` (train) and `test_batch.bin` into `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    generate(cfg.train, cfg.seed, cfg).save(dir.join("data_batch_1.bin"))?;
    generate(cfg.test, cfg.seed.wrapping_add(1), cfg).save(dir.join("test_batch.bin"))?;
    Ok(())
}
