use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Lower bound applied to every predicted scale.
pub const MIN_SCALE: f32 = 1e-3;
/// Lower bound applied to likelihoods before taking logs.
pub const MIN_LIKELIHOOD: f32 = 1e-9;

/// Graph nodes produced by the entropy model for one batch.
#[derive(Clone, Copy, Debug)]
pub struct PriorOutput {
    /// Quantized (or noisy) latent handed to the tail.
    pub z_hat: Var,
    /// Per-element probability mass of `z_hat`.
    pub z_likelihood: Var,
    pub h_hat: Option<Var>,
    pub h_likelihood: Option<Var>,
    /// Hyperprior mean and scale, `[N, C, H, W]`.
    pub mean: Option<Var>,
    pub scale: Option<Var>,
    /// `z_hat - mean` as seen by the Gaussian density.
    pub residual: Option<Var>,
}

/// Estimated code length in bits.
#[derive(Clone, Copy, Debug)]
pub struct RateBits {
    /// Per-element bits of the main latent, same shape as `z_hat`.
    pub z_bits: Var,
    pub h_bits: Option<Var>,
    /// `[N]` bits per sample including the hyper-latent.
    pub per_sample: Var,
    /// Scalar sum over the batch.
    pub total: Var,
}

impl PriorOutput {
    pub fn rate(&self, g: &mut Graph) -> Result<RateBits> {
        rate_bits(g, self.z_likelihood, self.h_likelihood)
    }
}

fn element_bits(g: &mut Graph, likelihood: Var) -> Result<Var> {
    if let Some(&p) = g.value(likelihood).iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain { op: "rate_bits", detail: format!("likelihood {p} outside (0, 1]") });
    }
    let ln = g.log(likelihood)?;
    Ok(g.affine(ln, -std::f32::consts::LOG2_E, 0.0))
}

/// `-log2 p` summed per sample and over the batch. Likelihoods must lie in
/// `(0, 1]`; the entropy model clamps them at [`MIN_LIKELIHOOD`].
pub fn rate_bits(g: &mut Graph, z_likelihood: Var, h_likelihood: Option<Var>) -> Result<RateBits> {
    let z_bits = element_bits(g, z_likelihood)?;
    let mut per_sample = g.sum_per_sample(z_bits)?;
    let h_bits = match h_likelihood {
        Some(h) => {
            let bits = element_bits(g, h)?;
            let hs = g.sum_per_sample(bits)?;
            per_sample = g.add(per_sample, hs)?;
            Some(bits)
        }
        None => None,
    };
    let total = g.sum(per_sample);
    Ok(RateBits { z_bits, h_bits, per_sample, total })
}

/// `-log2 p` of a single likelihood after the [`MIN_LIKELIHOOD`] clamp.
pub fn bits_from_likelihood(p: f32) -> f32 {
    -p.max(MIN_LIKELIHOOD).ln() * std::f32::consts::LOG2_E
}

/// Single-channel 2-D map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Map {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("map", format!("{height}x{width} from {} values", values.len())));
        }
        Ok(Map { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// Channel-summed bits of one sample's `[C, H, W]` per-element bits.
pub fn bitrate_map(bits: &[f32], shape: [usize; 3]) -> Result<Map> {
    let [c, h, w] = shape;
    if bits.len() != c * h * w {
        return Err(Error::shape("bitrate_map", format!("{shape:?} from {} values", bits.len())));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for ch in bits.chunks_exact(plane.max(1)) {
        for (o, &b) in out.iter_mut().zip(ch) {
            *o += b;
        }
    }
    Map::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn bits_of_half_is_one() {
        assert!((bits_from_likelihood(0.5) - 1.0).abs() < 1e-6);
        assert!((bits_from_likelihood(0.0) - 29.897353).abs() < 1e-4);
    }

    #[test]
    fn rate_sums_per_sample() {
        let mut g = Graph::new();
        let p = g.constant(&Tensor::new(&[2, 1, 1, 2], vec![0.5, 0.25, 1.0, 0.125]).unwrap());
        let r = rate_bits(&mut g, p, None).unwrap();
        let zero = g.constant(&Tensor::new(&[1, 1], vec![0.0]).unwrap());
        assert!(rate_bits(&mut g, zero, None).is_err());
        let per = g.value(r.per_sample).to_vec();
        assert!((per[0] - 3.0).abs() < 1e-5 && (per[1] - 3.0).abs() < 1e-5);
        assert!((g.item(r.total).unwrap() - 6.0).abs() < 1e-5);
    }

    #[test]
    fn map_sums_channels() {
        let m = bitrate_map(&[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], [2, 2, 2]).unwrap();
        assert_eq!(m.values, vec![11.0, 22.0, 33.0, 44.0]);
        assert_eq!(m.get(1, 0), 33.0);
    }
}
