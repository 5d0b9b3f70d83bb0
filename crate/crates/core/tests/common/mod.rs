//! Gradient oracles shared by the gradient tests and the acceptance suite:
//! per-op central-difference checks and an f64 reference forward of the
//! full split model written independently of the graph engine.

#![allow(dead_code)]

use std::collections::HashMap;

use entres_core::autodiff::finite_diff_check;
use entres_core::model::QuantMode;
use entres_core::train::rd_task_loss;
use entres_core::{Graph, ModelConfig, PriorKind, Result, SplitModel, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One random instance of an op: the point and the scalar function of it.
type Case = (Tensor, Build);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random::<bool>() { v } else { -v }
    })
}

/// Contracts `y` with fixed weights in `[0.5, 1.5]`. Positive weights keep
/// gradient components of linear ops away from cancellation, where the
/// relative error is dominated by f32 rounding of the function values.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), 0.5, 1.5);
    let w = g.constant(&w);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn elementwise(point: Tensor, seed: u64, op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Case {
    (point, Box::new(move |g, x| {
        let y = op(g, x)?;
        project(g, y, seed)
    }))
}

const SHAPE: [usize; 4] = [2, 3, 4, 4];

fn conv_case(rng: &mut ChaCha8Rng, wrt: usize, stride: usize) -> Case {
    let k = if stride == 2 { 4 } else { 3 };
    let mut parts = vec![
        uniform(rng, &[2, 3, 6, 6], 0.1, 1.0),
        uniform(rng, &[4, 3, k, k], 0.1, 0.5),
        uniform(rng, &[4], -0.5, 0.5),
    ];
    let point = parts.remove(wrt);
    let seed = rng.random();
    (point, Box::new(move |g, x| {
        let mut vars: Vec<Var> = parts.iter().map(|t| g.constant(t)).collect();
        vars.insert(wrt, x);
        let y = g.conv2d(vars[0], vars[1], vars[2], stride, 1)?;
        project(g, y, seed)
    }))
}

fn dense_case(rng: &mut ChaCha8Rng, wrt: usize) -> Case {
    let mut parts = vec![
        uniform(rng, &[3, 5], 0.1, 1.0),
        uniform(rng, &[4, 5], 0.1, 1.0),
        uniform(rng, &[4], -1.0, 1.0),
    ];
    let point = parts.remove(wrt);
    let seed = rng.random();
    (point, Box::new(move |g, x| {
        let mut vars: Vec<Var> = parts.iter().map(|t| g.constant(t)).collect();
        vars.insert(wrt, x);
        let y = g.dense(vars[0], vars[1], vars[2])?;
        project(g, y, seed)
    }))
}

/// Binary op with the checked operand at position `wrt` and a constant other.
fn binary_case(
    rng: &mut ChaCha8Rng,
    wrt: usize,
    op: impl Fn(&mut Graph, Var, Var) -> Result<Var> + 'static,
) -> Case {
    let point = uniform(rng, &SHAPE, -1.0, 1.0);
    let other = away_from_zero(rng, &SHAPE, 0.3, 1.0);
    let seed = rng.random();
    elementwise(point, seed, move |g, x| {
        let c = g.constant(&other);
        if wrt == 0 { op(g, x, c) } else { op(g, c, x) }
    })
}

/// Offsets from the location: at least 0.3 from zero when differentiating
/// by position (the mass is stationary at zero), at most 0.4 when
/// differentiating by scale (beyond half a bin the mass has a stationary
/// point in the scale).
fn bin_offsets(rng: &mut ChaCha8Rng, by_scale: bool) -> Tensor {
    if by_scale {
        uniform(rng, &SHAPE, -0.4, 0.4)
    } else {
        away_from_zero(rng, &SHAPE, 0.3, 2.5)
    }
}

fn logistic_case(rng: &mut ChaCha8Rng, wrt: usize) -> Case {
    let loc = uniform(rng, &[3], -1.0, 1.0);
    let mut d = bin_offsets(rng, wrt == 2);
    if wrt == 1 {
        // One sign per channel, so the per-channel gradient sums do not cancel.
        d = d.map(f32::abs);
    }
    let z = Tensor::from_fn(&SHAPE, |i| d.data()[i] + loc.data()[(i / 16) % 3]);
    let mut parts = vec![z, loc, uniform(rng, &[3], 0.5, 2.0)];
    let point = parts.remove(wrt);
    let seed = rng.random();
    elementwise(point, seed, move |g, x| {
        let mut vars: Vec<Var> = parts.iter().map(|t| g.constant(t)).collect();
        vars.insert(wrt, x);
        g.logistic_bin(vars[0], vars[1], vars[2])
    })
}

fn gaussian_case(rng: &mut ChaCha8Rng, wrt: usize) -> Case {
    let mut parts = vec![bin_offsets(rng, wrt == 1), uniform(rng, &SHAPE, 0.5, 2.0)];
    let point = parts.remove(wrt);
    let seed = rng.random();
    elementwise(point, seed, move |g, x| {
        let mut vars: Vec<Var> = parts.iter().map(|t| g.constant(t)).collect();
        vars.insert(wrt, x);
        g.gaussian_bin(vars[0], vars[1])
    })
}

/// Names of the checked ops, in [`op_case`] order.
pub const OPS: &[&str] = &[
    "conv2d.input", "conv2d.kernel", "conv2d.bias", "conv2d.stride2",
    "dense.input", "dense.weight", "dense.bias",
    "relu", "abs", "exp", "sigmoid", "softplus", "log",
    "sum", "mean", "sum_per_sample",
    "add.a", "add.b", "sub.a", "sub.b", "scale_add.b", "mul.a", "mul.b",
    "affine", "clamp", "clamp_min", "add_uniform_noise", "reshape",
    "softmax_cross_entropy", "global_avg_pool", "upsample_nearest", "narrow_channels",
    "logistic_bin.z", "logistic_bin.loc", "logistic_bin.scale",
    "gaussian_bin.residual", "gaussian_bin.scale",
];

/// A random instance of op number `op`. ReLU, abs and clamp points keep a
/// margin from their kinks so central differences stay on one branch.
pub fn op_case(op: usize, rng: &mut ChaCha8Rng) -> Case {
    let seed: u64 = rng.random();
    let x = uniform(rng, &SHAPE, -1.0, 1.0);
    match OPS[op] {
        "conv2d.input" => conv_case(rng, 0, 1),
        "conv2d.kernel" => conv_case(rng, 1, 1),
        "conv2d.bias" => conv_case(rng, 2, 1),
        "conv2d.stride2" => conv_case(rng, 0, 2),
        "dense.input" => dense_case(rng, 0),
        "dense.weight" => dense_case(rng, 1),
        "dense.bias" => dense_case(rng, 2),
        "relu" => elementwise(away_from_zero(rng, &SHAPE, 0.1, 1.0), seed, |g, x| Ok(g.relu(x))),
        "abs" => elementwise(away_from_zero(rng, &SHAPE, 0.1, 1.0), seed, |g, x| Ok(g.abs(x))),
        "exp" => elementwise(x, seed, |g, x| Ok(g.exp(x))),
        "sigmoid" => elementwise(uniform(rng, &SHAPE, -4.0, 4.0), seed, |g, x| Ok(g.sigmoid(x))),
        "softplus" => elementwise(uniform(rng, &SHAPE, -4.0, 4.0), seed, |g, x| Ok(g.softplus(x))),
        "log" => elementwise(uniform(rng, &SHAPE, 0.5, 2.0), seed, |g, x| g.log(x)),
        "sum" => (x, Box::new(|g, x| Ok(g.sum(x)))),
        "mean" => (x, Box::new(|g, x| Ok(g.mean(x)))),
        "sum_per_sample" => elementwise(x, seed, |g, x| g.sum_per_sample(x)),
        "add.a" => binary_case(rng, 0, |g, a, b| g.add(a, b)),
        "add.b" => binary_case(rng, 1, |g, a, b| g.add(a, b)),
        "sub.a" => binary_case(rng, 0, |g, a, b| g.sub(a, b)),
        "sub.b" => binary_case(rng, 1, |g, a, b| g.sub(a, b)),
        "scale_add.b" => binary_case(rng, 1, |g, a, b| g.scale_add(a, b, -0.7)),
        "mul.a" => binary_case(rng, 0, |g, a, b| g.mul(a, b)),
        "mul.b" => binary_case(rng, 1, |g, a, b| g.mul(a, b)),
        "affine" => elementwise(x, seed, |g, x| Ok(g.affine(x, -1.7, 0.3))),
        "clamp" => {
            let p = Tensor::from_fn(&SHAPE, |_| {
                let v: f32 = rng.random_range(0.0..0.9);
                [-0.9 + v * 0.4, -0.45 + v, 0.55 + v * 0.4][rng.random_range(0..3)]
            });
            elementwise(p, seed, |g, x| Ok(g.clamp(x, -0.5, 0.5)))
        }
        "clamp_min" => elementwise(away_from_zero(rng, &SHAPE, 0.1, 1.0), seed, |g, x| Ok(g.clamp_min(x, 0.0))),
        "add_uniform_noise" => elementwise(x, seed, move |g, x| Ok(g.add_uniform_noise(x, seed))),
        "reshape" => elementwise(x, seed, |g, x| g.reshape(x, &[6, 16])),
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            (uniform(rng, &[4, 5], -2.0, 2.0), Box::new(move |g, x| g.softmax_cross_entropy(x, &labels)))
        }
        "global_avg_pool" => elementwise(x, seed, |g, x| g.global_avg_pool(x)),
        "upsample_nearest" => elementwise(x, seed, |g, x| g.upsample_nearest(x, 2)),
        "narrow_channels" => elementwise(x, seed, |g, x| g.narrow_channels(x, 1, 2)),
        "logistic_bin.z" => logistic_case(rng, 0),
        "logistic_bin.loc" => logistic_case(rng, 1),
        "logistic_bin.scale" => logistic_case(rng, 2),
        "gaussian_bin.residual" => gaussian_case(rng, 0),
        "gaussian_bin.scale" => gaussian_case(rng, 1),
        other => unreachable!("unknown op {other}"),
    }
}

/// Worst relative error of `finite_diff_check` (ε = 1e-2) over `points`
/// random instances of every op.
pub fn op_gradient_errors(points: usize, seed: u64) -> Vec<(&'static str, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..OPS.len())
        .map(|op| {
            let worst = (0..points)
                .map(|_| {
                    let (point, f) = op_case(op, &mut rng);
                    finite_diff_check(f, &point, 1e-2).unwrap().max_rel_error
                })
                .fold(0.0f32, f32::max);
            (OPS[op], worst)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// f64 reference model

/// `[N, C, H, W]` tensor in f64.
#[derive(Clone, Debug)]
struct T4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl T4 {
    fn map(&self, f: impl Fn(f64) -> f64) -> T4 {
        T4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

type Params = HashMap<String, (Vec<usize>, Vec<f64>)>;

/// Direct-loop cross-correlation; 4×4 kernels are stride 2, 3×3 stride 1,
/// both with one pixel of zero padding.
fn conv(x: &T4, p: &Params, name: &str) -> T4 {
    let (ws, w) = &p[&format!("{name}.weight")];
    let (_, b) = &p[&format!("{name}.bias")];
    let [n, c, h, wd] = x.shape;
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], c);
    let stride = if k == 4 { 2 } else { 1 };
    let pad = 1isize;
    let ho = (h + 2 - k) / stride + 1;
    let wo = (wd + 2 - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad;
                                let ix = (xx * stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w[((o * c + ci) * k + ky) * k + kx]
                                    * x.data[((b_ * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((b_ * co + o) * ho + y) * wo + xx] = s;
                }
            }
        }
    }
    T4 { shape: [n, co, ho, wo], data: out }
}

fn relu(x: &T4) -> T4 {
    x.map(|v| v.max(0.0))
}

fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

fn logistic_cdf(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn normal_cdf(v: f64) -> f64 {
    0.5 * libm::erfc(-v / std::f64::consts::SQRT_2)
}

/// Mass of the unit bin around `d` under a zero-centred distribution.
fn bin(d: f64, s: f64, cdf: fn(f64) -> f64) -> f64 {
    let p = if d > 0.0 {
        cdf((-d + 0.5) / s) - cdf((-d - 0.5) / s)
    } else {
        cdf((d + 0.5) / s) - cdf((d - 0.5) / s)
    };
    p.max(1e-9)
}

/// Bits of `v` under the per-channel logistic named `name`.
fn factorized_bits(v: &T4, p: &Params, name: &str) -> f64 {
    let loc = &p[&format!("{name}.loc")].1;
    let raw = &p[&format!("{name}.raw_scale")].1;
    let [_, c, h, w] = v.shape;
    v.data
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let ch = (i / (h * w)) % c;
            -bin(z - loc[ch], softplus(raw[ch]).max(1e-3), logistic_cdf).log2()
        })
        .sum()
}

fn upsample2(x: &T4) -> T4 {
    let [n, c, h, w] = x.shape;
    let mut data = Vec::with_capacity(n * c * h * w * 4);
    for plane in x.data.chunks_exact(h * w) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                data.push(plane[(y / 2) * w + xx / 2]);
            }
        }
    }
    T4 { shape: [n, c, 2 * h, 2 * w], data }
}

/// Fixed inputs of one reference evaluation.
pub struct Reference {
    /// Loss value the graph computed at the base point.
    pub graph_loss: f64,
    config: ModelConfig,
    names: Vec<(String, Vec<usize>)>,
    x: T4,
    labels: Vec<usize>,
    z_noise: Vec<f64>,
    h_noise: Vec<f64>,
}

impl Reference {
    /// Training loss `CE + β/L · mean rate` with the given parameter values.
    pub fn loss(&self, values: &[Vec<f64>]) -> f64 {
        let p: Params = self
            .names
            .iter()
            .zip(values)
            .map(|((n, s), v)| (n.clone(), (s.clone(), v.clone())))
            .collect();
        let mut z = conv(&self.x, &p, "head.conv1");
        z = conv(&relu(&z), &p, "head.conv2");
        z = conv(&relu(&z), &p, "head.conv3");
        let n = z.shape[0];
        let z_t = T4 { shape: z.shape, data: z.data.iter().zip(&self.z_noise).map(|(a, b)| a + b).collect() };

        let bits = match self.config.prior_kind {
            PriorKind::Fp => factorized_bits(&z_t, &p, "prior"),
            PriorKind::Mshp => {
                let e = conv(&relu(&conv(&z, &p, "prior.hyper_enc1")), &p, "prior.hyper_enc2");
                let h_t = T4 { shape: e.shape, data: e.data.iter().zip(&self.h_noise).map(|(a, b)| a + b).collect() };
                let h_bits = factorized_bits(&h_t, &p, "prior.hyper");
                let d = conv(&relu(&conv(&upsample2(&h_t), &p, "prior.hyper_dec1")), &p, "prior.hyper_dec2");
                let [_, c, hh, ww] = z.shape;
                let plane = c * hh * ww;
                let mut z_bits = 0.0;
                for b in 0..n {
                    for i in 0..plane {
                        let mean = d.data[b * 2 * plane + i];
                        let scale = softplus(d.data[b * 2 * plane + plane + i]).max(1e-3);
                        let r = z_t.data[b * plane + i] - mean;
                        z_bits -= bin(r, scale, normal_cdf).log2();
                    }
                }
                z_bits + h_bits
            }
        };

        let mut t = z_t.clone();
        for name in ["tail.conv1", "tail.conv2", "tail.conv3"] {
            t = relu(&conv(&t, &p, name));
        }
        let [_, c, h, w] = t.shape;
        let pooled: Vec<f64> = t.data.chunks_exact(h * w).map(|pl| pl.iter().sum::<f64>() / (h * w) as f64).collect();
        let (fs, fw) = &p["tail.fc.weight"];
        let fb = &p["tail.fc.bias"].1;
        let k = fs[0];
        let mut ce = 0.0;
        for b in 0..n {
            let logits: Vec<f64> =
                (0..k).map(|o| fb[o] + (0..c).map(|i| fw[o * c + i] * pooled[b * c + i]).sum::<f64>()).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
            ce += lse - logits[self.labels[b]];
        }
        ce / n as f64 + self.config.beta as f64 / self.config.latent_len() as f64 * bits / n as f64
    }
}

/// Small model with non-zero biases, so no ReLU sits exactly at a kink.
pub fn tiny_model(prior: PriorKind, seed: u64) -> SplitModel {
    let config = ModelConfig {
        input_shape: [3, 8, 8],
        latent_channels: 4,
        latent_downsample: 2,
        num_classes: 5,
        prior_kind: prior,
        beta: 0.5,
        head_width: 6,
        tail_width: 5,
        hyper_channels: 3,
    };
    let mut model = SplitModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for i in 0..model.params().len() {
        if model.params().name(i).ends_with(".bias") {
            let len = model.params().tensor(i).len();
            let b = (0..len).map(|_| rng.random_range(-0.2..0.2)).collect();
            model.params_mut().set(i, b).unwrap();
        }
    }
    model
}

/// Backward-pass gradients of the training loss on a 2-sample batch, and
/// the matching f64 reference with the noise realised by the graph.
pub fn model_gradients(model: &SplitModel, seed: u64) -> (Vec<Vec<f32>>, Reference) {
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = cfg.input_shape;
    let x = uniform(&mut rng, &[2, c, h, w], 0.0, 1.0);
    let labels = vec![rng.random_range(0..cfg.num_classes), rng.random_range(0..cfg.num_classes)];

    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let xv = g.constant(&x);
    let out = model.forward(&mut g, &p, xv, QuantMode::Noisy { seed }).unwrap();
    let loss = rd_task_loss(&mut g, out.logits, &labels, out.rate.per_sample, cfg.beta, cfg.latent_len()).unwrap();
    g.backward(loss).unwrap();
    let grads = model.params().grads(&g, &p);

    let diff = |a: Var, b: Var, g: &Graph| -> Vec<f64> {
        g.value(a).iter().zip(g.value(b)).map(|(&a, &b)| a as f64 - b as f64).collect()
    };
    let z_noise = diff(out.prior.z_hat, out.latent, &g);
    let h_noise = match out.prior.h_hat {
        Some(h_hat) => {
            let hv = model.hyper_encode(&mut g, &p, out.latent).unwrap();
            diff(h_hat, hv, &g)
        }
        None => Vec::new(),
    };
    let names = model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let x = T4 { shape: [2, c, h, w], data: x.data().iter().map(|&v| v as f64).collect() };
    let graph_loss = g.item_f64(loss).unwrap();
    (grads, Reference { graph_loss, config: cfg, names, x, labels, z_noise, h_noise })
}

/// Worst `|a − n| / max(|a|, |n|, 1e-6)` over every parameter component,
/// with `n` a central difference (ε = 1e-6) of the f64 reference.
pub fn model_gradient_error(prior: PriorKind, seed: u64) -> (f64, usize) {
    let model = tiny_model(prior, seed);
    let (grads, reference) = model_gradients(&model, seed);
    let base: Vec<Vec<f64>> =
        model.params().iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let mut plus = base.clone();
            plus[pi][j] += eps;
            let mut minus = base.clone();
            minus[pi][j] -= eps;
            let numeric = (reference.loss(&plus) - reference.loss(&minus)) / (2.0 * eps);
            let a = grad[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            count += 1;
        }
    }
    (worst, count)
}
