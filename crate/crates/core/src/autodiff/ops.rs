//! Primitive operations and their backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{grad_slot, Graph, Op, Var};
use super::linalg::{col2im_add, im2col, sgemm, ConvGeom};
use super::special;
use crate::error::{Error, Result};

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value: Vec<f32> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// 2-D cross-correlation of an NCHW batch with a KCHW kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let (&[n, c, h, w], &[k, kc, kh, kw]) = (is, ks) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {is:?} and kernel {ks:?} must both be rank 4"),
            ));
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if bs != [k] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} for {k} filters")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input with pad {pad} does not tile into a {kh}x{kw}/{stride} window"),
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let np = geom.columns();
        let plane = geom.ho * geom.wo;
        let mut mat = vec![0.0f32; k * np];
        sgemm(
            k,
            geom.patch(),
            np,
            self.value(kernel),
            (geom.patch(), 1),
            &cols,
            (np, 1),
            0.0,
            &mut mat,
            (np, 1),
        );
        let bias_v = self.value(bias);
        let mut out = vec![0.0f32; n * k * plane];
        for (ki, row) in mat.chunks_exact(np).enumerate() {
            for b in 0..n {
                let dst = &mut out[(b * k + ki) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(&row[b * plane..(b + 1) * plane]) {
                    *d = s + bias_v[ki];
                }
            }
        }
        let op = Op::Conv2d { input, kernel, bias, geom, cols };
        Ok(self.push(vec![n, k, geom.ho, geom.wo], out, op, &[input, kernel, bias]))
    }

    /// `input · weightᵀ + bias` for `input: [N, D]`, `weight: [M, D]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[n, d], &[m, wd]) = (is, ws) else {
            return Err(Error::shape("dense", format!("input {is:?}, weight {ws:?}")));
        };
        if wd != d || bs != [m] {
            return Err(Error::shape(
                "dense",
                format!("input {is:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let mut out = vec![0.0f32; n * m];
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(self.value(bias));
        }
        sgemm(n, d, m, self.value(input), (d, 1), self.value(weight), (1, d), 1.0, &mut out, (m, 1));
        Ok(self.push(vec![n, m], out, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f32::abs, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| special::sigmoid(v as f64) as f32, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| special::softplus(v as f64) as f32, Op::Softplus(x))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        Ok(self.unary(x, f32::ln, Op::Log(x)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>();
        self.push_scalar(s, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let s = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len().max(1) as f64;
        self.push_scalar(s, Op::Mean(x), &[x])
    }

    /// Sums every axis but the leading one: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let n = *self
            .shape(x)
            .first()
            .ok_or_else(|| Error::shape("sum_per_sample", "scalar input"))?;
        let vals = self.value(x);
        let per = if n == 0 { 0 } else { vals.len() / n };
        let out: Vec<f32> = (0..n)
            .map(|b| vals[b * per..(b + 1) * per].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        Ok(self.push(vec![n], out, Op::SumPerSample(x), &[x]))
    }

    /// `a + c·b`.
    pub fn scale_add(&mut self, a: Var, b: Var, c: f32) -> Result<Var> {
        self.same_shape("scale_add", a, b)?;
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + c * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::ScaleAdd { a, b, c }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.scale_add(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.scale_add(a, b, -1.0)
    }

    /// `mul·x + add`.
    pub fn affine(&mut self, x: Var, mul: f32, add: f32) -> Var {
        self.unary(x, |v| mul * v + add, Op::Affine { x, mul })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input lies
    /// outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn clamp_min(&mut self, x: Var, lo: f32) -> Var {
        self.clamp(x, lo, f32::INFINITY)
    }

    /// Adds `U(-0.5, 0.5)` noise drawn from a generator seeded with `seed`.
    /// The noise is a constant for differentiation.
    pub fn add_uniform_noise(&mut self, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .map(|&v| v + (rng.random::<f32>() - 0.5))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::PassThrough(x), &[x])
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn round_ste(&mut self, x: Var) -> Var {
        self.unary(x, f32::round, Op::PassThrough(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be [N, K], got {:?}", self.shape(logits)),
            ));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, classes: k });
        }
        let vals = self.value(logits);
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (b, (row, prow)) in vals.chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = ((v as f64 - max).exp() / z) as f32;
            }
            loss += z.ln() + max - row[labels[b]] as f64;
        }
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push_scalar(loss / n.max(1) as f64, op, &[logits]))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(Error::shape("global_avg_pool", format!("{:?}", self.shape(x))));
        };
        let plane = h * w;
        let out: Vec<f32> = self
            .value(x)
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f32>() / plane as f32)
            .collect();
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Nearest-neighbour upsampling of an NCHW batch by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(Error::shape("upsample_nearest", format!("{:?}", self.shape(x))));
        };
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x);
        let mut out = vec![0.0f32; n * c * ho * wo];
        for (p, dst) in out.chunks_exact_mut(ho * wo).enumerate() {
            let plane = &src[p * h * w..][..h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = plane[(y / factor) * w + xx / factor];
                }
            }
        }
        Ok(self.push(vec![n, c, ho, wo], out, Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// Channels `start..start+len` of an `[N, C, ...]` tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(Error::shape(
                "narrow_channels",
                format!("channels {start}..{} of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for b in 0..shape[0] {
            out.extend_from_slice(&src[(b * shape[1] + start) * inner..][..len * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        Ok(self.push(oshape, out, Op::Narrow { x, start, len }, &[x]))
    }

    /// Per-element mass of the unit bin around `z` under a logistic with
    /// per-channel location `loc: [C]` and scale `scale: [C]` (`z: [N, C, ...]`).
    pub fn logistic_bin(&mut self, z: Var, loc: Var, scale: Var) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape.len() < 2 || self.shape(loc) != [shape[1]] || self.shape(scale) != [shape[1]] {
            return Err(Error::shape(
                "logistic_bin",
                format!(
                    "z {shape:?}, loc {:?}, scale {:?}",
                    self.shape(loc),
                    self.shape(scale)
                ),
            ));
        }
        if let Some(s) = self.value(scale).iter().find(|&&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::Param(format!("logistic scale must be positive, got {s}")));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let (zv, lv, sv) = (self.value(z), self.value(loc), self.value(scale));
        let len = zv.len();
        let (mut p, mut dz, mut ds) = (vec![0.0f32; len], vec![0.0f32; len], vec![0.0f32; len]);
        for (i, &zi) in zv.iter().enumerate() {
            let ch = (i / inner) % c;
            let m = special::logistic_bin(zi as f64 - lv[ch] as f64, sv[ch] as f64);
            p[i] = m.p as f32;
            dz[i] = m.dp_dd as f32;
            ds[i] = m.dp_ds as f32;
        }
        let op = Op::LogisticBin { z, loc, scale, dp_dz: dz, dp_ds: ds };
        Ok(self.push(shape, p, op, &[z, loc, scale]))
    }

    /// Per-element mass of the unit bin around `residual` under a zero-mean
    /// Gaussian with elementwise standard deviation `scale`.
    pub fn gaussian_bin(&mut self, residual: Var, scale: Var) -> Result<Var> {
        self.same_shape("gaussian_bin", residual, scale)?;
        if let Some(s) = self.value(scale).iter().find(|&&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::Param(format!("gaussian scale must be positive, got {s}")));
        }
        let (rv, sv) = (self.value(residual), self.value(scale));
        let len = rv.len();
        let (mut p, mut dr, mut ds) = (vec![0.0f32; len], vec![0.0f32; len], vec![0.0f32; len]);
        for i in 0..len {
            let m = special::gaussian_bin(rv[i] as f64, sv[i] as f64);
            p[i] = m.p as f32;
            dr[i] = m.dp_dd as f32;
            ds[i] = m.dp_ds as f32;
        }
        let shape = self.shape(residual).to_vec();
        let op = Op::GaussianBin { residual, scale, dp_dr: dr, dp_ds: ds };
        Ok(self.push(shape, p, op, &[residual, scale]))
    }

    pub(crate) fn backprop_node(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let g = geom;
                let np = g.columns();
                let plane = g.ho * g.wo;
                // [N, K, P] -> [K, N·P]
                let mut gmat = vec![0.0f32; g.k * np];
                for b in 0..g.n {
                    for ki in 0..g.k {
                        gmat[ki * np + b * plane..][..plane]
                            .copy_from_slice(&gout[(b * g.k + ki) * plane..][..plane]);
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *bias) {
                    for (d, row) in db.iter_mut().zip(gmat.chunks_exact(np)) {
                        *d += row.iter().sum::<f32>();
                    }
                }
                if let Some(dk) = grad_slot(nodes, grads, *kernel) {
                    sgemm(g.k, np, g.patch(), &gmat, (np, 1), cols, (1, np), 1.0, dk, (g.patch(), 1));
                }
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0f32; g.patch() * np];
                    let kv = &nodes[kernel.0].value;
                    sgemm(g.patch(), g.k, np, kv, (1, g.patch()), &gmat, (np, 1), 0.0, &mut dcols, (np, 1));
                    let dx = grad_slot(nodes, grads, *input).expect("input requires grad");
                    col2im_add(&dcols, g, dx);
                }
            }
            Op::Dense { input, weight, bias } => {
                let (n, d) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                let m = nodes[weight.0].shape[0];
                if let Some(db) = grad_slot(nodes, grads, *bias) {
                    for row in gout.chunks_exact(m) {
                        for (a, &g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                }
                if let Some(dw) = grad_slot(nodes, grads, *weight) {
                    let xv = &nodes[input.0].value;
                    sgemm(m, n, d, gout, (1, m), xv, (d, 1), 1.0, dw, (d, 1));
                }
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    let wv = &nodes[weight.0].value;
                    sgemm(n, m, d, gout, (m, 1), wv, (d, 1), 1.0, dx, (d, 1));
                }
            }
            Op::Relu(x) => elementwise(nodes, grads, *x, gout, |v, _| if v > 0.0 { 1.0 } else { 0.0 }, out),
            Op::Abs(x) => elementwise(nodes, grads, *x, gout, |v, _| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }, out),
            Op::Log(x) => elementwise(nodes, grads, *x, gout, |v, _| 1.0 / v, out),
            Op::Exp(x) => elementwise(nodes, grads, *x, gout, |_, y| y, out),
            Op::Sigmoid(x) => elementwise(nodes, grads, *x, gout, |_, y| y * (1.0 - y), out),
            Op::Softplus(x) => elementwise(nodes, grads, *x, gout, |v, _| special::sigmoid(v as f64) as f32, out),
            Op::Affine { x, mul } => elementwise(nodes, grads, *x, gout, |_, _| *mul, out),
            Op::Clamp { x, lo, hi } => {
                elementwise(nodes, grads, *x, gout, |v, _| if v >= *lo && v <= *hi { 1.0 } else { 0.0 }, out)
            }
            Op::PassThrough(x) | Op::Reshape(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let g = gout[0] / dx.len().max(1) as f32;
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::SumPerSample(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let per = dx.len() / gout.len().max(1);
                    for (chunk, &g) in dx.chunks_exact_mut(per.max(1)).zip(gout) {
                        chunk.iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            Op::ScaleAdd { a, b, c } => {
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    da.iter_mut().zip(gout).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    db.iter_mut().zip(gout).for_each(|(d, &g)| *d += c * g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    for ((d, &g), &y) in da.iter_mut().zip(gout).zip(bv.iter()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    for ((d, &g), &x) in db.iter_mut().zip(gout).zip(av.iter()) {
                        *d += g * x;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if let Some(dl) = grad_slot(nodes, grads, *logits) {
                    let n = labels.len();
                    let k = probs.len() / n.max(1);
                    let scale = gout[0] / n as f32;
                    for (b, (drow, prow)) in dl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[b] { 1.0 } else { 0.0 };
                            *d += scale * (p - target);
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let plane = dx.len() / gout.len().max(1);
                    for (chunk, &g) in dx.chunks_exact_mut(plane).zip(gout) {
                        let g = g / plane as f32;
                        chunk.iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let (h, w) = (nodes[x.0].shape[2], nodes[x.0].shape[3]);
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let (ho, wo) = (h * factor, w * factor);
                    for (dplane, gplane) in dx.chunks_exact_mut(h * w).zip(gout.chunks_exact(ho * wo)) {
                        for y in 0..ho {
                            for xx in 0..wo {
                                dplane[(y / factor) * w + xx / factor] += gplane[y * wo + xx];
                            }
                        }
                    }
                }
            }
            Op::Narrow { x, start, len } => {
                let xs = &nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for b in 0..n {
                        let dst = &mut dx[(b * c + start) * inner..][..len * inner];
                        let src = &gout[b * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::LogisticBin { z, loc, scale, dp_dz, dp_ds } => {
                let zs = &nodes[z.0].shape;
                let c = zs[1];
                let inner: usize = zs[2..].iter().product();
                if let Some(dz) = grad_slot(nodes, grads, *z) {
                    for ((d, &g), &j) in dz.iter_mut().zip(gout).zip(dp_dz) {
                        *d += g * j;
                    }
                }
                if let Some(dl) = grad_slot(nodes, grads, *loc) {
                    for (i, (&g, &j)) in gout.iter().zip(dp_dz).enumerate() {
                        dl[(i / inner) % c] -= g * j;
                    }
                }
                if let Some(dsc) = grad_slot(nodes, grads, *scale) {
                    for (i, (&g, &j)) in gout.iter().zip(dp_ds).enumerate() {
                        dsc[(i / inner) % c] += g * j;
                    }
                }
            }
            Op::GaussianBin { residual, scale, dp_dr, dp_ds } => {
                if let Some(dr) = grad_slot(nodes, grads, *residual) {
                    for ((d, &g), &j) in dr.iter_mut().zip(gout).zip(dp_dr) {
                        *d += g * j;
                    }
                }
                if let Some(dsc) = grad_slot(nodes, grads, *scale) {
                    for ((d, &g), &j) in dsc.iter_mut().zip(gout).zip(dp_ds) {
                        *d += g * j;
                    }
                }
            }
        }
    }
}

/// Accumulates `gout · f(x, y)` into `x`'s gradient, where `y` is the op's output.
fn elementwise(
    nodes: &[super::graph::Node],
    grads: &mut [Option<Vec<f32>>],
    x: Var,
    gout: &[f32],
    f: impl Fn(f32, f32) -> f32,
    out: &[f32],
) {
    let xv = &nodes[x.0].value;
    if let Some(dx) = grad_slot(nodes, grads, x) {
        for (((d, &g), &v), &y) in dx.iter_mut().zip(gout).zip(xv.iter()).zip(out) {
            *d += g * f(v, y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(&[2, 3, 5, 5], |i| i as f32 * 0.1));
        let k = g.constant(&Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.constant(&t(&[4], &[0.5, -1.0, 2.0, 0.0]));
        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
        for (i, &v) in g.value(y).iter().enumerate() {
            assert_eq!(v, [0.5, -1.0, 2.0, 0.0][(i / 9) % 4]);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.constant(&Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(&Tensor::zeros(&[1]));
        let err = g.conv2d(x, k, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("2 channels"));
        let k2 = g.constant(&Tensor::zeros(&[1, 2, 3, 3]));
        // (4 - 3) is not a multiple of stride 2
        assert!(g.conv2d(x, k2, b, 2, 0).is_err());
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(&Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = g.constant(&Tensor::zeros(&[3]));
        let y = g.dense(x, eye, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let w0 = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&t(&[2], &[7.0, -1.0]));
        let y = g.dense(x, w0, b).unwrap();
        assert_eq!(g.value(y), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn dense_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[2, 3]));
        let w = g.constant(&Tensor::zeros(&[2, 4]));
        let b = g.constant(&Tensor::zeros(&[2]));
        assert!(matches!(g.dense(x, w, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_values_and_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[-2.0, 0.0, 3.0]));
        let y = g.abs(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[2.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.item(m).unwrap(), 3.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let logits = g.constant(&Tensor::full(&[3, 10], 0.7));
        let l = g.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((g.item(l).unwrap() - 10f32.ln()).abs() < 1e-6);

        let sat = g.constant(&Tensor::from_fn(&[1, 10], |i| if i == 3 { 1000.0 } else { 0.0 }));
        let l = g.softmax_cross_entropy(sat, &[3]).unwrap();
        assert!(g.item(l).unwrap().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.constant(&Tensor::zeros(&[1, 10]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[10]),
            Err(Error::Label { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn uniform_noise_is_bounded_deterministic_and_transparent() {
        let x = Tensor::from_fn(&[256], |i| i as f32 * 0.01).with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let a = g.add_uniform_noise(xv, 42);
        let b = g.add_uniform_noise(xv, 42);
        assert_eq!(g.value(a), g.value(b));
        for (o, i) in g.value(a).iter().zip(x.data()) {
            assert!((o - i).abs() <= 0.5);
        }
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert!(g.grad(xv).unwrap().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn round_ste_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(&t(&[4], &[0.4, 0.5, -0.5, 1.6]));
        let r = g.round_ste(x);
        assert_eq!(g.value(r), &[0.0, 1.0, -1.0, 2.0]);
        let rr = g.round_ste(r);
        assert_eq!(g.value(rr), g.value(r));
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let ints = g.constant(&t(&[3], &[-3.0, 0.0, 7.0]));
        let r = g.round_ste(ints);
        assert_eq!(g.value(r), &[-3.0, 0.0, 7.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        // y = e^x used twice vs. computed twice independently.
        let x0 = t(&[3], &[0.1, -0.4, 0.9]);
        let mut shared = Graph::new();
        let x = shared.param(&x0);
        let e = shared.exp(x);
        let two = shared.add(e, e).unwrap();
        let s = shared.sum(two);
        shared.backward(s).unwrap();

        let mut unrolled = Graph::new();
        let x2 = unrolled.param(&x0);
        let e1 = unrolled.exp(x2);
        let e2 = unrolled.exp(x2);
        let two = unrolled.add(e1, e2).unwrap();
        let s = unrolled.sum(two);
        unrolled.backward(s).unwrap();
        assert_eq!(shared.grad(x).unwrap(), unrolled.grad(x2).unwrap());
    }

    #[test]
    fn upsample_and_narrow_shapes() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_fn(&[1, 4, 2, 2], |i| i as f32));
        let u = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.shape(u), &[1, 4, 4, 4]);
        assert_eq!(&g.value(u)[..4], &[0.0, 0.0, 1.0, 1.0]);
        let n = g.narrow_channels(u, 1, 2).unwrap();
        assert_eq!(g.shape(n), &[1, 2, 4, 4]);
        assert_eq!(g.value(n)[0], 4.0);
        let s = g.sum(n);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(&gx[..4], &[0.0; 4]);
        assert_eq!(&gx[4..8], &[4.0; 4]);
    }
}
