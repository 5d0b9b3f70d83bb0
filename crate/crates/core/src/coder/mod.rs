//! Range coding of quantized latents under the entropy model's CDF tables.
//!
//! The factorized prior codes every latent element against the table of its
//! channel. The hyperprior codes two streams: the hyper-latent under its own
//! factorized tables, then the residuals `round(z - μ)` against the scale
//! bin nearest to each element's predicted `σ`.

mod bitstream;
mod cdf;
mod range;
mod selftest;

pub use bitstream::{Bitstream, MAGIC, VERSION};
pub use cdf::{
    quantize_pmf, scale_bin, scale_bin_values, CdfTable, NUM_SYMBOLS, PRECISION_BITS, SCALE_BINS,
    SCALE_BIN_MAX, SCALE_BIN_MIN,
};
pub use range::{RangeDecoder, RangeEncoder};
pub use selftest::{self_test, SelfTestReport};

use crate::error::{Error, Result};
use crate::model::{PriorKind, QuantizedLatent, SplitModel};

/// Range-codes `symbols`, element `i` against table `context(i)`.
pub fn encode_symbols(symbols: &[i32], tables: &CdfTable, context: impl Fn(usize) -> usize) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new(tables.precision_bits());
    for (i, &s) in symbols.iter().enumerate() {
        let (start, freq) = tables.interval(context(i), s)?;
        enc.encode(start, freq);
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_symbols`]; fails unless `payload` is exactly the
/// encoding of `count` symbols.
pub fn decode_symbols(
    payload: &[u8],
    count: usize,
    tables: &CdfTable,
    context: impl Fn(usize) -> usize,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload, tables.precision_bits());
    let symbols = (0..count)
        .map(|i| dec.decode(tables.cdf(context(i))).map(|k| tables.min_symbol() + k as i32))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(symbols)
}

/// Ideal code length of `symbols` under the quantized tables, in bits.
pub fn cross_entropy_bits(symbols: &[i32], tables: &CdfTable, context: impl Fn(usize) -> usize) -> Result<f64> {
    symbols.iter().enumerate().map(|(i, &s)| tables.bits(context(i), s)).sum()
}

fn channel_context(shape: [usize; 3]) -> impl Fn(usize) -> usize {
    let plane = (shape[1] * shape[2]).max(1);
    move |i| i / plane
}

fn check_channels(tables: &CdfTable, shape: [usize; 3]) -> Result<()> {
    if tables.num_tables() != shape[0] {
        return Err(Error::shape(
            "encode",
            format!("{} channel tables for latent {shape:?}", tables.num_tables()),
        ));
    }
    Ok(())
}

/// Codes a latent with one table per channel (factorized prior).
pub fn encode(z_hat: &QuantizedLatent, tables: &CdfTable) -> Result<Bitstream> {
    let shape = z_hat.shape();
    check_channels(tables, shape)?;
    let payload = encode_symbols(z_hat.values(), tables, channel_context(shape))?;
    Ok(Bitstream { prior_kind: PriorKind::Fp, shape, hyper_shape: None, payloads: vec![payload] })
}

pub fn decode(bs: &Bitstream, tables: &CdfTable) -> Result<QuantizedLatent> {
    if bs.prior_kind != PriorKind::Fp {
        return Err(Error::Format("expected a factorized-prior stream".into()));
    }
    check_channels(tables, bs.shape)?;
    let count = bs.shape.iter().product();
    let values = decode_symbols(&bs.payloads[0], count, tables, channel_context(bs.shape))?;
    QuantizedLatent::new(bs.shape, values)
}

/// Two-stream hyperprior encoding: `h_hat` under `hyper_tables`, then
/// `residual` with element `i` coded at the scale bin of `scales[i]`.
pub fn mshp_encode(
    h_hat: &QuantizedLatent,
    residual: &QuantizedLatent,
    scales: &[f32],
    hyper_tables: &CdfTable,
) -> Result<Bitstream> {
    if scales.len() != residual.len() {
        return Err(Error::shape("mshp_encode", format!("{} scales for {} residuals", scales.len(), residual.len())));
    }
    check_channels(hyper_tables, h_hat.shape())?;
    let h_payload = encode_symbols(h_hat.values(), hyper_tables, channel_context(h_hat.shape()))?;
    let bins: Vec<usize> = scales.iter().map(|&s| scale_bin(s)).collect();
    let r_payload = encode_symbols(residual.values(), CdfTable::gaussian_bins(), |i| bins[i])?;
    Ok(Bitstream {
        prior_kind: PriorKind::Mshp,
        shape: residual.shape(),
        hyper_shape: Some(h_hat.shape()),
        payloads: vec![h_payload, r_payload],
    })
}

/// Decodes `ĥ`, asks `scales_for` for the per-element scales it implies,
/// then decodes the residuals. Returns `(ĥ, residual)`.
pub fn mshp_decode(
    bs: &Bitstream,
    hyper_tables: &CdfTable,
    scales_for: impl FnOnce(&QuantizedLatent) -> Result<Vec<f32>>,
) -> Result<(QuantizedLatent, QuantizedLatent)> {
    let hyper_shape = match (bs.prior_kind, bs.hyper_shape) {
        (PriorKind::Mshp, Some(s)) => s,
        _ => return Err(Error::Format("expected a hyperprior stream".into())),
    };
    check_channels(hyper_tables, hyper_shape)?;
    let h_count = hyper_shape.iter().product();
    let h_values = decode_symbols(&bs.payloads[0], h_count, hyper_tables, channel_context(hyper_shape))?;
    let h_hat = QuantizedLatent::new(hyper_shape, h_values)?;
    let scales = scales_for(&h_hat)?;
    let count: usize = bs.shape.iter().product();
    if scales.len() != count {
        return Err(Error::shape("mshp_decode", format!("{} scales for {count} residuals", scales.len())));
    }
    let bins: Vec<usize> = scales.iter().map(|&s| scale_bin(s)).collect();
    let r_values = decode_symbols(&bs.payloads[1], count, CdfTable::gaussian_bins(), |i| bins[i])?;
    Ok((h_hat, QuantizedLatent::new(bs.shape, r_values)?))
}

/// Factorized tables of a model: over the latent for FP, over the
/// hyper-latent for MSHP.
pub fn build_cdf_tables(model: &SplitModel) -> Result<CdfTable> {
    let (loc, scale) = model.factorized_values();
    CdfTable::logistic(&loc, &scale)
}

/// Result of coding one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Coded {
    pub bitstream: Bitstream,
    /// Symbols of the main stream: `ẑ` for FP, `round(z - μ)` for MSHP.
    pub symbols: QuantizedLatent,
    pub hyper: Option<QuantizedLatent>,
    /// Latent the tail receives, `[C, H, W]`.
    pub z_hat: Vec<f32>,
    /// Ideal code length of all streams under the quantized tables.
    pub table_bits: f64,
}

/// Encoder/decoder pair bound to one model.
pub struct Codec<'m> {
    model: &'m SplitModel,
    tables: CdfTable,
}

impl<'m> Codec<'m> {
    pub fn new(model: &'m SplitModel) -> Result<Self> {
        Ok(Codec { model, tables: build_cdf_tables(model)? })
    }

    pub fn tables(&self) -> &CdfTable {
        &self.tables
    }

    /// Quantizes and codes one sample's continuous latent `z` (`[C, H, W]`).
    pub fn encode(&self, z: &[f32]) -> Result<Coded> {
        let shape = self.model.config().latent_shape();
        if z.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("codec_encode", format!("{} values for latent {shape:?}", z.len())));
        }
        match self.model.prior_kind() {
            PriorKind::Fp => {
                let symbols = QuantizedLatent::quantize(shape, z)?;
                let bitstream = encode(&symbols, &self.tables)?;
                let table_bits = cross_entropy_bits(symbols.values(), &self.tables, channel_context(shape))?;
                Ok(Coded { bitstream, z_hat: symbols.to_f32(), symbols, hyper: None, table_bits })
            }
            PriorKind::Mshp => {
                let h = self.model.hyper_encode_values(z)?;
                let h_hat = QuantizedLatent::quantize(self.model.config().hyper_shape(), &h)?;
                let (mean, scale) = self.model.hyper_decode_values(&h_hat)?;
                let centered: Vec<f32> = z.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
                let symbols = QuantizedLatent::quantize(shape, &centered)?;
                let bitstream = mshp_encode(&h_hat, &symbols, &scale, &self.tables)?;
                let bins: Vec<usize> = scale.iter().map(|&s| scale_bin(s)).collect();
                let table_bits = cross_entropy_bits(h_hat.values(), &self.tables, channel_context(h_hat.shape()))?
                    + cross_entropy_bits(symbols.values(), CdfTable::gaussian_bins(), |i| bins[i])?;
                let z_hat = symbols.values().iter().zip(&mean).map(|(&r, &m)| r as f32 + m).collect();
                Ok(Coded { bitstream, symbols, hyper: Some(h_hat), z_hat, table_bits })
            }
        }
    }

    /// Recovers the latent the tail receives from a stream.
    pub fn decode(&self, bs: &Bitstream) -> Result<Vec<f32>> {
        if bs.prior_kind != self.model.prior_kind() || bs.shape != self.model.config().latent_shape() {
            return Err(Error::Format(format!(
                "stream is {} {:?}, model expects {} {:?}",
                bs.prior_kind,
                bs.shape,
                self.model.prior_kind(),
                self.model.config().latent_shape()
            )));
        }
        match bs.prior_kind {
            PriorKind::Fp => Ok(decode(bs, &self.tables)?.to_f32()),
            PriorKind::Mshp => {
                let mut mean = Vec::new();
                let (_, residual) = mshp_decode(bs, &self.tables, |h_hat| {
                    let (m, s) = self.model.hyper_decode_values(h_hat)?;
                    mean = m;
                    Ok(s)
                })?;
                Ok(residual.values().iter().zip(&mean).map(|(&r, &m)| r as f32 + m).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests;
