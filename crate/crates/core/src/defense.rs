//! Total-variation denoising of perturbed inputs, optionally restricted to
//! regions the entropy model finds cheap to code.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{QuantMode, SplitModel};

/// How the soft mask is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Denoise every pixel equally.
    None,
    /// Scale every pixel's step by the interpolated latent likelihood.
    #[default]
    PriorSoftMask,
}

/// Reduction of per-element likelihoods over latent channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReduction {
    #[default]
    Mean,
    Min,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseSpec {
    /// Smoothing weight of the TV term.
    pub lambda: f32,
    /// Step size.
    pub alpha: f32,
    pub steps: usize,
    pub mask_mode: MaskMode,
    pub reduction: MaskReduction,
    pub interpolation: Interpolation,
}

impl Default for DenoiseSpec {
    fn default() -> Self {
        DenoiseSpec {
            lambda: 0.015,
            alpha: 0.05,
            steps: 100,
            mask_mode: MaskMode::PriorSoftMask,
            reduction: MaskReduction::Mean,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl DenoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "denoising needs alpha > 0 and lambda >= 0, got alpha {} lambda {}",
                self.alpha, self.lambda
            )));
        }
        Ok(())
    }

    /// Denoises a batch, computing the mask from `x` itself when enabled.
    pub fn apply(&self, model: &SplitModel, x: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let out = match self.mask_mode {
            MaskMode::None => tv_denoise(x, self)?,
            MaskMode::PriorSoftMask => {
                let m = prior_soft_mask(model, x, self.reduction, self.interpolation)?;
                masked_tv_denoise(x, &m, self)?
            }
        };
        Ok(out.x)
    }

    /// Short stable description, used as a CSV field.
    pub fn descriptor(&self) -> String {
        let mask = match (self.mask_mode, self.reduction, self.interpolation) {
            (MaskMode::None, ..) => "tv".to_string(),
            (MaskMode::PriorSoftMask, r, i) => {
                let mut s = "masked_tv".to_string();
                if r == MaskReduction::Min {
                    s.push_str(":min");
                }
                if i == Interpolation::Nearest {
                    s.push_str(":nearest");
                }
                s
            }
        };
        format!("{mask}:l{}:a{}:n{}", self.lambda, self.alpha, self.steps)
    }
}

fn dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N, C, H, W], got {:?}", x.shape()))),
    }
}

/// Anisotropic TV of every sample: absolute forward differences along both
/// axes where the neighbour exists, summed over channels.
pub fn total_variation(x: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = dims(x, "total_variation")?;
    Ok(x.data().chunks_exact((c * h * w).max(1)).take(n).map(|img| plane_tv(img, h, w)).collect())
}

fn plane_tv(img: &[f32], h: usize, w: usize) -> f64 {
    let mut tv = 0.0f64;
    for p in img.chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x];
                if y + 1 < h {
                    tv += (p[(y + 1) * w + x] - v).abs() as f64;
                }
                if x + 1 < w {
                    tv += (p[y * w + x + 1] - v).abs() as f64;
                }
            }
        }
    }
    tv
}

fn sign(d: f32) -> f32 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`total_variation`] with `sign(0) = 0`.
pub fn tv_subgradient(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = dims(x, "tv_subgradient")?;
    let mut g = vec![0.0f32; x.len()];
    for (p, gp) in x.data().chunks_exact(h * w).zip(g.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if y + 1 < h {
                    let s = sign(p[i + w] - p[i]);
                    gp[i + w] += s;
                    gp[i] -= s;
                }
                if xx + 1 < w {
                    let s = sign(p[i + 1] - p[i]);
                    gp[i + 1] += s;
                    gp[i] -= s;
                }
            }
        }
    }
    Tensor::new(x.shape(), g)
}

/// Denoised batch with the objective `½‖x - x'‖² + λ·TV(x)` (summed over
/// the batch) at every iterate, including the first and the last.
#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub x: Tensor,
    pub objective: Vec<f64>,
}

fn objective(x: &[f32], x_prime: &[f32], shape: &[usize], lambda: f32) -> f64 {
    let fidelity: f64 = x.iter().zip(x_prime).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() * 0.5;
    let (h, w) = (shape[2], shape[3]);
    fidelity + lambda as f64 * plane_tv(x, h, w)
}

fn descend(x_prime: &Tensor, mask: Option<&[f32]>, spec: &DenoiseSpec) -> Result<DenoiseOutput> {
    spec.validate()?;
    dims(x_prime, "tv_denoise")?;
    let xp = x_prime.data();
    let mut x = xp.to_vec();
    let mut trace = Vec::with_capacity(spec.steps + 1);
    trace.push(objective(&x, xp, x_prime.shape(), spec.lambda));
    for _ in 0..spec.steps {
        let g = tv_subgradient(&Tensor::new(x_prime.shape(), x.clone())?)?;
        for (i, v) in x.iter_mut().enumerate() {
            let grad = (*v - xp[i]) + spec.lambda * g.data()[i];
            let step = match mask {
                Some(m) => spec.alpha * m[i] * grad,
                None => spec.alpha * grad,
            };
            *v = (*v - step).clamp(0.0, 1.0);
        }
        trace.push(objective(&x, xp, x_prime.shape(), spec.lambda));
    }
    Ok(DenoiseOutput { x: Tensor::new(x_prime.shape(), x)?, objective: trace })
}

/// Subgradient descent on `½‖x - x'‖² + λ·TV(x)` from `x'`, clamping to
/// `[0, 1]` after every step. The mask mode of `spec` is ignored.
pub fn tv_denoise(x_prime: &Tensor, spec: &DenoiseSpec) -> Result<DenoiseOutput> {
    descend(x_prime, None, spec)
}

/// Like [`tv_denoise`], with every pixel's step scaled by `mask` in `[0, 1]`.
pub fn masked_tv_denoise(x_prime: &Tensor, mask: &Tensor, spec: &DenoiseSpec) -> Result<DenoiseOutput> {
    if mask.shape() != x_prime.shape() {
        return Err(Error::shape(
            "masked_tv_denoise",
            format!("mask {:?} for images {:?}", mask.shape(), x_prime.shape()),
        ));
    }
    if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain { op: "masked_tv_denoise", detail: format!("mask value {v} outside [0, 1]") });
    }
    descend(x_prime, Some(mask.data()), spec)
}

/// Per-location likelihood of the rounded latent, reduced over channels:
/// `[N, h, w]` values in `[0, 1]`.
pub fn likelihood_map(model: &SplitModel, x: &Tensor, reduction: MaskReduction) -> Result<(Vec<f32>, [usize; 2])> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xv = g.constant(x);
    let (_, prior) = model.encode_forward(&mut g, &p, xv, QuantMode::Rounded)?;
    let [c, h, w] = model.config().latent_shape();
    let n = x.shape()[0];
    let lik = g.value(prior.z_likelihood);
    let mut out = vec![0.0f32; n * h * w];
    for s in 0..n {
        for i in 0..h * w {
            let vals = (0..c).map(|ch| lik[(s * c + ch) * h * w + i].clamp(0.0, 1.0));
            out[s * h * w + i] = match reduction {
                MaskReduction::Mean => (vals.map(f64::from).sum::<f64>() / c as f64) as f32,
                MaskReduction::Min => vals.fold(1.0, f32::min),
            };
        }
    }
    Ok((out, [h, w]))
}

/// Resizes one `h × w` map to `oh × ow` (half-pixel centres, edge clamped).
pub fn resize_map(map: &[f32], [h, w]: [usize; 2], [oh, ow]: [usize; 2], mode: Interpolation) -> Vec<f32> {
    let src = |o: usize, n: usize, on: usize| ((o as f32 + 0.5) * n as f32 / on as f32 - 0.5).clamp(0.0, (n - 1) as f32);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = match mode {
                Interpolation::Nearest => map[(y * h / oh) * w + x * w / ow],
                Interpolation::Bilinear => {
                    let (sy, sx) = (src(y, h, oh), src(x, w, ow));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
                    let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
                    let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
                    (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
                }
            };
        }
    }
    out
}

/// Likelihood map of the rounded latent of `x_prime`, upsampled to the
/// image size and broadcast over colour channels. Regions with a high
/// bit rate get small values and are protected from smoothing.
pub fn prior_soft_mask(
    model: &SplitModel,
    x_prime: &Tensor,
    reduction: MaskReduction,
    interpolation: Interpolation,
) -> Result<Tensor> {
    let (n, c, h, w) = dims(x_prime, "prior_soft_mask")?;
    let (maps, hw) = likelihood_map(model, x_prime, reduction)?;
    let per = hw[0] * hw[1];
    let mut out = Vec::with_capacity(x_prime.len());
    for s in 0..n {
        let up = resize_map(&maps[s * per..(s + 1) * per], hw, [h, w], interpolation);
        for _ in 0..c {
            out.extend_from_slice(&up);
        }
    }
    Tensor::new(x_prime.shape(), out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn two_by_two() -> Tensor {
        Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap()
    }

    fn noisy(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, 3, 16, 16], |i| {
            let base = if (i % 16) < 8 { 0.3 } else { 0.7 };
            (base + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)
        })
    }

    fn naive_tv(x: &Tensor) -> f64 {
        let [_, c, h, w] = x.shape().try_into().unwrap();
        let at = |ch: usize, i: usize, j: usize| x.data()[ch * h * w + i * w + j] as f64;
        let mut tv = 0.0;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if i + 1 < h {
                        tv += (at(ch, i + 1, j) - at(ch, i, j)).abs();
                    }
                    if j + 1 < w {
                        tv += (at(ch, i, j + 1) - at(ch, i, j)).abs();
                    }
                }
            }
        }
        tv
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&Tensor::full(&[2, 3, 4, 4], 0.4)).unwrap(), vec![0.0, 0.0]);
        assert_eq!(total_variation(&two_by_two()).unwrap(), vec![2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.random());
            assert!((total_variation(&x).unwrap()[0] - naive_tv(&x)).abs() < 1e-5);
        }
    }

    #[test]
    fn subgradient_examples() {
        assert!(tv_subgradient(&Tensor::full(&[1, 2, 3, 3], 0.5)).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(tv_subgradient(&two_by_two()).unwrap().data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn subgradient_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Distinct multiples of 1e-2 keep every difference at least 1e-2 from zero.
        let mut vals: Vec<f32> = (0..36).map(|i| i as f32 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(&[1, 1, 6, 6], vals).unwrap();
        let g = tv_subgradient(&x).unwrap();
        let eps = 1e-3f32;
        for i in 0..x.len() {
            let bump = |d: f32| {
                let mut v = x.to_vec();
                v[i] += d;
                total_variation(&Tensor::new(x.shape(), v).unwrap()).unwrap()[0]
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps as f64);
            assert!((fd - g.data()[i] as f64).abs() < 1e-3, "pixel {i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn denoise_limits() {
        let x = noisy(1);
        let zero_lambda = DenoiseSpec { lambda: 0.0, ..DenoiseSpec::default() };
        assert_eq!(tv_denoise(&x, &zero_lambda).unwrap().x, x);
        let no_steps = DenoiseSpec { steps: 0, ..DenoiseSpec::default() };
        assert_eq!(tv_denoise(&x, &no_steps).unwrap().x, x);
        assert!(tv_denoise(&x, &DenoiseSpec { alpha: 0.0, ..DenoiseSpec::default() }).is_err());
    }

    #[test]
    fn objective_descends_then_tv_drops() {
        let x = noisy(2);
        let spec = DenoiseSpec { lambda: 0.1, ..DenoiseSpec::default() };
        let out = tv_denoise(&x, &spec).unwrap();
        let t = &out.objective;
        // Fixed-step subgradient descent decreases the objective until the
        // TV signs start to flip; afterwards it oscillates near the optimum.
        assert!(t[..6].windows(2).all(|w| w[1] <= w[0]), "{:?}", &t[..6]);
        assert!(t[t.len() - 1] < 0.5 * t[0]);
        let before = total_variation(&x).unwrap();
        let after = total_variation(&out.x).unwrap();
        assert!(after.iter().zip(&before).all(|(a, b)| a < b));
    }

    #[test]
    fn mask_extremes() {
        let x = noisy(3);
        let spec = DenoiseSpec { steps: 20, ..DenoiseSpec::default() };
        let zeros = Tensor::zeros(x.shape());
        assert_eq!(masked_tv_denoise(&x, &zeros, &spec).unwrap().x, x);
        let ones = Tensor::full(x.shape(), 1.0);
        assert_eq!(masked_tv_denoise(&x, &ones, &spec).unwrap().x, tv_denoise(&x, &spec).unwrap().x);
        assert!(masked_tv_denoise(&x, &Tensor::zeros(&[1, 3, 16, 16]), &spec).is_err());
        assert!(masked_tv_denoise(&x, &Tensor::full(x.shape(), 1.5), &spec).is_err());
    }

    #[test]
    fn zero_mask_pixels_never_move() {
        let x = noisy(4);
        let mask = Tensor::from_fn(x.shape(), |i| if i % 3 == 0 { 0.0 } else { 0.7 });
        let out = masked_tv_denoise(&x, &mask, &DenoiseSpec { steps: 30, ..DenoiseSpec::default() }).unwrap();
        for (i, (a, b)) in out.x.data().iter().zip(x.data()).enumerate() {
            if i % 3 == 0 {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bilinear_upsampling_is_bounded_by_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map: Vec<f32> = (0..64).map(|_| rng.random()).collect();
        let mut max_cell = 0.0f32;
        for y in 0..8 {
            for x in 0..8 {
                if x + 1 < 8 {
                    max_cell = max_cell.max((map[y * 8 + x + 1] - map[y * 8 + x]).abs());
                }
                if y + 1 < 8 {
                    max_cell = max_cell.max((map[(y + 1) * 8 + x] - map[y * 8 + x]).abs());
                }
            }
        }
        let up = resize_map(&map, [8, 8], [32, 32], Interpolation::Bilinear);
        for y in 0..32 {
            for x in 0..31 {
                assert!((up[y * 32 + x + 1] - up[y * 32 + x]).abs() <= max_cell + 1e-6);
            }
        }
        let near = resize_map(&map, [8, 8], [32, 32], Interpolation::Nearest);
        assert_eq!(near[5 * 32 + 9], map[8 + 2]);
    }

    #[test]
    fn soft_mask_is_a_probability_map() {
        let cfg = ModelConfig {
            input_shape: [3, 16, 16],
            latent_channels: 4,
            head_width: 4,
            tail_width: 6,
            ..ModelConfig::default()
        };
        let model = SplitModel::new(cfg, 1).unwrap();
        let x = noisy(6);
        for red in [MaskReduction::Mean, MaskReduction::Min] {
            for interp in [Interpolation::Bilinear, Interpolation::Nearest] {
                let m = prior_soft_mask(&model, &x, red, interp).unwrap();
                assert_eq!(m.shape(), x.shape());
                assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(m.data()[..256], m.data()[256..512]);
            }
        }
    }
}
