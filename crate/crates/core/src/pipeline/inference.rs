use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::coder::{Bitstream, Codec};
use crate::defense::DenoiseSpec;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, QuantMode, SplitModel};
use crate::perturb::Perturbation;
use crate::train::Metrics;

use super::data::Dataset;

/// Analytic link between device and server.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Link {
    pub bandwidth_bytes_per_s: f64,
    pub rtt_s: f64,
}

impl Default for Link {
    fn default() -> Self {
        Link { bandwidth_bytes_per_s: 1e6, rtt_s: 0.01 }
    }
}

impl Link {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bytes_per_s > 0.0) || !(self.rtt_s >= 0.0) {
            return Err(Error::Config(format!("invalid link {self:?}")));
        }
        Ok(())
    }

    /// Transmission time of `bytes` plus one round trip.
    pub fn latency_s(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s + self.rtt_s
    }
}

/// Outcome of sending one image through the split pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub prediction: usize,
    pub bitstream: Bitstream,
    /// Serialized stream length, header included.
    pub size_bytes: usize,
    pub latency_s: f64,
    /// Estimated rate of the rounded latent under the entropy model.
    pub est_bits: f64,
}

/// Head, coder and tail bound to one model and link.
pub struct SplitInference<'m> {
    model: &'m SplitModel,
    codec: Codec<'m>,
    link: Link,
}

impl<'m> SplitInference<'m> {
    pub fn new(model: &'m SplitModel, link: Link) -> Result<Self> {
        link.validate()?;
        Ok(SplitInference { model, codec: Codec::new(model)?, link })
    }

    /// Head → round → encode → serialize → parse → decode → tail → argmax
    /// for every image of the batch. The tail only sees decoded latents.
    pub fn run(&self, x: &Tensor) -> Result<Vec<InferenceResult>> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let xv = g.constant(x);
        let (z, prior) = self.model.encode_forward(&mut g, &p, xv, QuantMode::Rounded)?;
        let rate = prior.rate(&mut g)?;
        let est: Vec<f64> = g.value(rate.per_sample).iter().map(|&b| b as f64).collect();
        let latent = self.model.config().latent_shape();
        let per = self.model.config().latent_len();
        let n = x.shape()[0];

        let mut decoded = Vec::with_capacity(n * per);
        let mut streams = Vec::with_capacity(n);
        for zi in g.value(z).chunks_exact(per) {
            let coded = self.codec.encode(zi)?;
            let bytes = coded.bitstream.to_bytes()?;
            let received = Bitstream::from_bytes(&bytes)?;
            let z_dec = self.codec.decode(&received)?;
            if z_dec.iter().zip(&coded.z_hat).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::Decode("decoded latent differs from the encoded one".into()));
            }
            decoded.extend(z_dec);
            streams.push((received, bytes.len()));
        }
        let [c, h, w] = latent;
        let logits = self.model.classify(&Tensor::new(&[n, c, h, w], decoded)?)?;
        let preds = argmax_rows(&logits, self.model.config().num_classes);
        Ok(streams
            .into_iter()
            .zip(preds)
            .zip(est)
            .map(|(((bitstream, size_bytes), prediction), est_bits)| InferenceResult {
                prediction,
                latency_s: self.link.latency_s(size_bytes),
                bitstream,
                size_bytes,
                est_bits,
            })
            .collect())
    }
}

/// One-shot [`SplitInference::run`].
pub fn run_split_inference(model: &SplitModel, x: &Tensor, link: &Link) -> Result<Vec<InferenceResult>> {
    SplitInference::new(model, *link)?.run(x)
}

/// How a dataset is pushed through the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub link: Link,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { batch_size: 100, link: Link::default() }
    }
}

/// Images as they reach the head: perturbed, then denoised.
pub fn prepare_batch(
    model: &SplitModel,
    x: &Tensor,
    labels: &[usize],
    batch: u64,
    perturbation: Option<&Perturbation>,
    defense: Option<&DenoiseSpec>,
) -> Result<Tensor> {
    let x = match perturbation {
        Some(p) => p.apply(model, x, labels, batch)?,
        None => x.clone(),
    };
    match defense {
        Some(d) => d.apply(model, &x),
        None => Ok(x),
    }
}

/// Accuracy and coded size over `data` with the real coder in the loop.
pub fn evaluate_pipeline(
    model: &SplitModel,
    data: &Dataset,
    perturbation: Option<&Perturbation>,
    defense: Option<&DenoiseSpec>,
    opts: &EvalOptions,
) -> Result<Metrics> {
    if let Some(p) = perturbation {
        p.validate()?;
    }
    if let Some(d) = defense {
        d.validate()?;
    }
    let runner = SplitInference::new(model, opts.link)?;
    let n = data.len();
    let (mut preds, mut labels, mut sizes, mut payloads, mut est, mut lat) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, (x, y)) in data.batches(opts.batch_size).enumerate() {
        let x = prepare_batch(model, &x, &y, b as u64, perturbation, defense)?;
        for r in runner.run(&x)? {
            preds.push(r.prediction);
            sizes.push(r.size_bytes);
            payloads.push(r.bitstream.payload_len());
            est.push(r.est_bits);
            lat.push(r.latency_s);
        }
        labels.extend(y);
    }
    Ok(Metrics::from_samples(&preds, &labels, &sizes, &payloads, &est, &lat))
}
