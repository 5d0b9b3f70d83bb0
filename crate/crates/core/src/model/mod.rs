//! Split classifier: a small convolutional head that runs on the device, a
//! tail classifier that runs on the server, and the entropy model whose
//! likelihoods price every latent element.

mod latent;
mod params;
mod prior;

pub use latent::{quantize_value, QuantizedLatent, SUPPORT_MAX, SUPPORT_MIN};
pub use params::{Bound, ParamSet};
pub use prior::{
    bitrate_map, bits_from_likelihood, rate_bits, Map, PriorOutput, RateBits, MIN_LIKELIHOOD, MIN_SCALE,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use params::Initializer;

/// Entropy model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Fully factorized: one input-independent distribution per channel.
    Fp,
    /// Mean-scale hyperprior: per-element Gaussian parameters decoded from
    /// a separately coded hyper-latent.
    Mshp,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Fp => "fp",
            PriorKind::Mshp => "mshp",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PriorKind::Fp => 0,
            PriorKind::Mshp => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PriorKind::Fp),
            1 => Ok(PriorKind::Mshp),
            other => Err(Error::Format(format!("unknown prior kind {other}"))),
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp" | "factorized" => Ok(PriorKind::Fp),
            "mshp" | "hyperprior" => Ok(PriorKind::Mshp),
            other => Err(Error::Config(format!("unknown prior kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(C, H, W)` of input images.
    pub input_shape: [usize; 3],
    pub latent_channels: usize,
    /// Spatial reduction of the head; a power of two.
    pub latent_downsample: usize,
    pub num_classes: usize,
    pub prior_kind: PriorKind,
    /// Weight of the rate term in the training objective.
    pub beta: f32,
    pub head_width: usize,
    pub tail_width: usize,
    pub hyper_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: [3, 32, 32],
            latent_channels: 48,
            latent_downsample: 4,
            num_classes: 10,
            prior_kind: PriorKind::Fp,
            beta: 0.08,
            head_width: 32,
            tail_width: 64,
            hyper_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let ds = self.latent_downsample;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", self.input_shape)));
        }
        if !ds.is_power_of_two() || ds > 8 {
            return Err(Error::Config(format!("latent_downsample {ds} must be 1, 2, 4 or 8")));
        }
        if h % ds != 0 || w % ds != 0 {
            return Err(Error::Config(format!("latent_downsample {ds} must divide {h}x{w}")));
        }
        if self.prior_kind == PriorKind::Mshp && ((h / ds) % 2 != 0 || (w / ds) % 2 != 0) {
            return Err(Error::Config("hyperprior needs an even latent grid".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.latent_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("need latent channels and at least two classes".into()));
        }
        if self.head_width == 0 || self.tail_width == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(C, H, W)` of the latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.input_shape;
        let ds = self.latent_downsample;
        [self.latent_channels, h / ds, w / ds]
    }

    pub fn hyper_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.latent_shape();
        [self.hyper_channels, h / 2, w / 2]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), init.he(&[cout, cin, k, k], cin * k * k));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { weight, bias, stride, pad }
    }

    /// 3×3 same-size or 4×4 stride-2 halving convolution.
    fn build(params: &mut ParamSet, init: &mut Initializer, name: &str, cin: usize, cout: usize, down: bool) -> Self {
        if down {
            Self::new(params, init, name, (cin, cout, 4), 2, 1)
        } else {
            Self::new(params, init, name, (cin, cout, 3), 1, 1)
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.get(self.weight), p.get(self.bias), self.stride, self.pad)
    }
}

/// Indices of a factorized (per-channel logistic) density.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorizedIdx {
    loc: usize,
    raw_scale: usize,
}

impl FactorizedIdx {
    fn build(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        // softplus(0.5413) ≈ 1
        let loc = params.push(format!("{name}.loc"), Tensor::zeros(&[channels]));
        let raw_scale = params.push(format!("{name}.raw_scale"), Tensor::full(&[channels], 0.5413));
        FactorizedIdx { loc, raw_scale }
    }
}

/// Parameters of the entropy model, as indices into the model's [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PriorModel {
    Factorized(FactorizedIdx),
    Hyper {
        encoder: [ConvLayer; 2],
        hyper: FactorizedIdx,
        decoder: [ConvLayer; 2],
    },
}

impl PriorModel {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorModel::Factorized(_) => PriorKind::Fp,
            PriorModel::Hyper { .. } => PriorKind::Mshp,
        }
    }
}

/// How the continuous latent is discretized in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Training surrogate: additive `U(-0.5, 0.5)` noise from `seed`.
    Noisy { seed: u64 },
    /// Rounding with a straight-through gradient, clamped to the coder support.
    Rounded,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub latent: Var,
    pub prior: PriorOutput,
    pub logits: Var,
    pub rate: RateBits,
}

/// Head, tail and entropy model with all learnable parameters.
#[derive(Clone, Debug)]
pub struct SplitModel {
    config: ModelConfig,
    params: ParamSet,
    head: Vec<ConvLayer>,
    tail: Vec<ConvLayer>,
    classifier: (usize, usize),
    prior: PriorModel,
}

impl SplitModel {
    /// Builds the architecture for `config` with seeded initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seed);
        let [cin, _, _] = config.input_shape;
        let cz = config.latent_channels;
        let hw = config.head_width;
        let downs = config.latent_downsample.trailing_zeros() as usize;

        // Three convolutions; the first `downs` of them halve the resolution.
        let widths = [cin, (hw / 2).max(1), hw, cz];
        let mut head = Vec::new();
        for i in 0..3 {
            head.push(ConvLayer::build(
                &mut params,
                &mut init,
                &format!("head.conv{}", i + 1),
                widths[i],
                widths[i + 1],
                i < downs,
            ));
        }

        let tw = config.tail_width;
        let [_, zh, zw] = config.latent_shape();
        let tail_down = zh % 2 == 0 && zw % 2 == 0 && zh >= 4;
        let tail = vec![
            ConvLayer::build(&mut params, &mut init, "tail.conv1", cz, tw, false),
            ConvLayer::build(&mut params, &mut init, "tail.conv2", tw, tw, tail_down),
            ConvLayer::build(&mut params, &mut init, "tail.conv3", tw, tw, false),
        ];
        let fc_w = params.push("tail.fc.weight", init.he(&[config.num_classes, tw], tw));
        let fc_b = params.push("tail.fc.bias", Tensor::zeros(&[config.num_classes]));

        let prior = match config.prior_kind {
            PriorKind::Fp => PriorModel::Factorized(FactorizedIdx::build(&mut params, "prior", cz)),
            PriorKind::Mshp => {
                let ch = config.hyper_channels;
                let encoder = [
                    ConvLayer::build(&mut params, &mut init, "prior.hyper_enc1", cz, cz, false),
                    ConvLayer::build(&mut params, &mut init, "prior.hyper_enc2", cz, ch, true),
                ];
                let hyper = FactorizedIdx::build(&mut params, "prior.hyper", ch);
                let decoder = [
                    ConvLayer::build(&mut params, &mut init, "prior.hyper_dec1", ch, cz, false),
                    ConvLayer::build(&mut params, &mut init, "prior.hyper_dec2", cz, 2 * cz, false),
                ];
                PriorModel::Hyper { encoder, hyper, decoder }
            }
        };

        Ok(SplitModel { config, params, head, tail, classifier: (fc_w, fc_b), prior })
    }

    /// Rebuilds the architecture for `config` and loads `params` by name.
    pub fn from_params(config: ModelConfig, params: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn prior(&self) -> &PriorModel {
        &self.prior
    }

    pub fn prior_kind(&self) -> PriorKind {
        self.prior.kind()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return Err(Error::shape(
                "head_forward",
                format!("expected [N, {:?}], got {s:?}", self.config.input_shape),
            ));
        }
        Ok(())
    }

    /// `x → z`; ReLU between convolutions, linear output.
    pub fn head_forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.apply(g, p, h)?;
            if i + 1 < self.head.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `ẑ → logits`.
    pub fn tail_forward(&self, g: &mut Graph, p: &Bound, z_hat: Var) -> Result<Var> {
        let s = g.shape(z_hat);
        if s.len() != 4 || s[1..] != self.config.latent_shape() {
            return Err(Error::shape(
                "tail_forward",
                format!("expected [N, {:?}], got {s:?}", self.config.latent_shape()),
            ));
        }
        let mut h = z_hat;
        for layer in &self.tail {
            h = layer.apply(g, p, h)?;
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h)?;
        g.dense(pooled, p.get(self.classifier.0), p.get(self.classifier.1))
    }

    /// Head, entropy model and tail in one pass.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: QuantMode) -> Result<ForwardOutput> {
        let latent = self.head_forward(g, p, x)?;
        let prior = self.prior_forward(g, p, latent, mode)?;
        let logits = self.tail_forward(g, p, prior.z_hat)?;
        let rate = prior.rate(g)?;
        Ok(ForwardOutput { latent, prior, logits, rate })
    }

    /// Head and entropy model only; the tail is skipped.
    pub fn encode_forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: QuantMode) -> Result<(Var, PriorOutput)> {
        let latent = self.head_forward(g, p, x)?;
        let prior = self.prior_forward(g, p, latent, mode)?;
        Ok((latent, prior))
    }

    /// Per-channel `(location, scale)` of a factorized density, as graph nodes.
    pub(crate) fn factorized_params(&self, g: &mut Graph, p: &Bound, idx: FactorizedIdx) -> (Var, Var) {
        let s = g.softplus(p.get(idx.raw_scale));
        let s = g.clamp_min(s, MIN_SCALE);
        (p.get(idx.loc), s)
    }

    /// Hyper-encoder: `z → h`.
    pub fn hyper_encode(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let PriorModel::Hyper { encoder, .. } = &self.prior else {
            return Err(Error::Config("hyper_encode needs a hyperprior model".into()));
        };
        let e1 = encoder[0].apply(g, p, z)?;
        let e1 = g.relu(e1);
        encoder[1].apply(g, p, e1)
    }

    /// Hyper-decoder: `ĥ → (μ, σ)` for every latent element.
    pub fn hyper_decode(&self, g: &mut Graph, p: &Bound, h_hat: Var) -> Result<(Var, Var)> {
        let PriorModel::Hyper { decoder, .. } = &self.prior else {
            return Err(Error::Config("hyper_decode needs a hyperprior model".into()));
        };
        let cz = self.config.latent_channels;
        let up = g.upsample_nearest(h_hat, 2)?;
        let d1 = decoder[0].apply(g, p, up)?;
        let d1 = g.relu(d1);
        let d2 = decoder[1].apply(g, p, d1)?;
        let mean = g.narrow_channels(d2, 0, cz)?;
        let raw = g.narrow_channels(d2, cz, cz)?;
        let scale = g.softplus(raw);
        let scale = g.clamp_min(scale, MIN_SCALE);
        Ok((mean, scale))
    }

    /// Likelihoods of `z` under the entropy model; see [`QuantMode`].
    pub fn prior_forward(&self, g: &mut Graph, p: &Bound, z: Var, mode: QuantMode) -> Result<PriorOutput> {
        match &self.prior {
            PriorModel::Factorized(idx) => {
                let z_hat = match mode {
                    QuantMode::Noisy { seed } => g.add_uniform_noise(z, seed),
                    QuantMode::Rounded => {
                        let r = g.round_ste(z);
                        g.clamp(r, SUPPORT_MIN as f32, SUPPORT_MAX as f32)
                    }
                };
                let (loc, scale) = self.factorized_params(g, p, *idx);
                let p = g.logistic_bin(z_hat, loc, scale)?;
                let z_likelihood = g.clamp_min(p, MIN_LIKELIHOOD);
                Ok(PriorOutput {
                    z_hat,
                    z_likelihood,
                    h_hat: None,
                    h_likelihood: None,
                    mean: None,
                    scale: None,
                    residual: None,
                })
            }
            PriorModel::Hyper { hyper, .. } => {
                let h = self.hyper_encode(g, p, z)?;
                let h_hat = match mode {
                    QuantMode::Noisy { seed } => g.add_uniform_noise(h, seed ^ 0x5DEE_CE66_D1CE_4E5B),
                    QuantMode::Rounded => {
                        let r = g.round_ste(h);
                        g.clamp(r, SUPPORT_MIN as f32, SUPPORT_MAX as f32)
                    }
                };
                let (hloc, hscale) = self.factorized_params(g, p, *hyper);
                let hp = g.logistic_bin(h_hat, hloc, hscale)?;
                let h_likelihood = g.clamp_min(hp, MIN_LIKELIHOOD);
                let (mean, scale) = self.hyper_decode(g, p, h_hat)?;
                let (z_hat, residual) = match mode {
                    QuantMode::Noisy { seed } => {
                        let zn = g.add_uniform_noise(z, seed);
                        let r = g.sub(zn, mean)?;
                        (zn, r)
                    }
                    QuantMode::Rounded => {
                        let centered = g.sub(z, mean)?;
                        let r = g.round_ste(centered);
                        let r = g.clamp(r, SUPPORT_MIN as f32, SUPPORT_MAX as f32);
                        (g.add(r, mean)?, r)
                    }
                };
                let zp = g.gaussian_bin(residual, scale)?;
                let z_likelihood = g.clamp_min(zp, MIN_LIKELIHOOD);
                Ok(PriorOutput {
                    z_hat,
                    z_likelihood,
                    h_hat: Some(h_hat),
                    h_likelihood: Some(h_likelihood),
                    mean: Some(mean),
                    scale: Some(scale),
                    residual: Some(residual),
                })
            }
        }
    }

    /// Evaluates `(location, scale)` of the factorized density over the
    /// main latent (FP) or the hyper-latent (MSHP), exactly as the graph does.
    pub fn factorized_values(&self) -> (Vec<f32>, Vec<f32>) {
        let idx = match &self.prior {
            PriorModel::Factorized(idx) => *idx,
            PriorModel::Hyper { hyper, .. } => *hyper,
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (loc, scale) = self.factorized_params(&mut g, &p, idx);
        (g.value(loc).to_vec(), g.value(scale).to_vec())
    }

    /// Runs the hyper-encoder on one sample's continuous latent.
    pub fn hyper_encode_values(&self, z: &[f32]) -> Result<Vec<f32>> {
        let [c, h, w] = self.config.latent_shape();
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(&Tensor::new(&[1, c, h, w], z.to_vec())?);
        let hv = self.hyper_encode(&mut g, &p, zv)?;
        Ok(g.value(hv).to_vec())
    }

    /// Runs the hyper-decoder on one sample's integer hyper-latent.
    pub fn hyper_decode_values(&self, h_hat: &QuantizedLatent) -> Result<(Vec<f32>, Vec<f32>)> {
        let [c, h, w] = h_hat.shape();
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let hv = g.constant(&Tensor::new(&[1, c, h, w], h_hat.to_f32())?);
        let (mean, scale) = self.hyper_decode(&mut g, &p, hv)?;
        Ok((g.value(mean).to_vec(), g.value(scale).to_vec()))
    }

    /// Logits for a batch of decoded latents (no gradient).
    pub fn classify(&self, z_hat: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = g.constant(z_hat);
        let logits = self.tail_forward(&mut g, &p, z)?;
        Ok(g.value(logits).to_vec())
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
