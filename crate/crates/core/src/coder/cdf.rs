use std::sync::OnceLock;

use crate::autodiff::special;
use crate::error::{Error, Result};
use crate::model::{SUPPORT_MAX, SUPPORT_MIN};

/// Default CDF precision: frequencies sum to `2^16`.
pub const PRECISION_BITS: u32 = 16;
/// Number of symbols in the coder support `[-127, 127]`.
pub const NUM_SYMBOLS: usize = (SUPPORT_MAX - SUPPORT_MIN + 1) as usize;
/// Number of log-spaced scale bins used for hyperprior residuals.
pub const SCALE_BINS: usize = 64;
pub const SCALE_BIN_MIN: f64 = 1e-3;
pub const SCALE_BIN_MAX: f64 = 64.0;

/// Integer cumulative-frequency tables, one per coding context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    precision_bits: u32,
    min_symbol: i32,
    /// Each entry has `num_symbols + 1` values, from 0 to `2^precision_bits`.
    cdfs: Vec<Vec<u32>>,
}

impl CdfTable {
    /// Quantizes each pmf with [`quantize_pmf`] and accumulates it.
    pub fn from_pmfs(pmfs: &[Vec<f64>], min_symbol: i32, precision_bits: u32) -> Result<Self> {
        let cdfs = pmfs
            .iter()
            .map(|pmf| {
                let freqs = quantize_pmf(pmf, precision_bits)?;
                let mut cdf = Vec::with_capacity(freqs.len() + 1);
                cdf.push(0u32);
                let mut acc = 0u32;
                for f in freqs {
                    acc += f;
                    cdf.push(acc);
                }
                Ok(cdf)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CdfTable { precision_bits, min_symbol, cdfs })
    }

    /// One table per channel of a discretized logistic with edge folding.
    pub fn logistic(loc: &[f32], scale: &[f32]) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::shape("cdf_table", format!("{} locations, {} scales", loc.len(), scale.len())));
        }
        let pmfs = loc
            .iter()
            .zip(scale)
            .map(|(&m, &s)| {
                check_scale(s)?;
                Ok(discretized_pmf(m as f64, s as f64, special::logistic_bin, special::sigmoid))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pmfs(&pmfs, SUPPORT_MIN, PRECISION_BITS)
    }

    /// Zero-mean discretized Gaussians at the [`scale_bin_values`].
    pub fn gaussian_bins() -> &'static CdfTable {
        static TABLE: OnceLock<CdfTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let pmfs: Vec<Vec<f64>> = scale_bin_values()
                .iter()
                .map(|&s| discretized_pmf(0.0, s, special::gaussian_bin, special::normal_cdf))
                .collect();
            CdfTable::from_pmfs(&pmfs, SUPPORT_MIN, PRECISION_BITS).expect("valid gaussian pmfs")
        })
    }

    pub fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    pub fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    pub fn max_symbol(&self) -> i32 {
        self.min_symbol + self.num_symbols() as i32 - 1
    }

    pub fn num_tables(&self) -> usize {
        self.cdfs.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.cdfs.first().map_or(0, |c| c.len() - 1)
    }

    pub fn cdf(&self, table: usize) -> &[u32] {
        &self.cdfs[table]
    }

    /// `(cumulative start, frequency)` of `symbol` in `table`.
    pub fn interval(&self, table: usize, symbol: i32) -> Result<(u32, u32)> {
        let cdf = &self.cdfs[table];
        let i = symbol - self.min_symbol;
        if i < 0 || i as usize >= cdf.len() - 1 {
            return Err(Error::SymbolOutOfSupport {
                value: symbol,
                min: self.min_symbol,
                max: self.max_symbol(),
            });
        }
        let i = i as usize;
        Ok((cdf[i], cdf[i + 1] - cdf[i]))
    }

    /// Ideal code length of `symbol` under the quantized table, in bits.
    pub fn bits(&self, table: usize, symbol: i32) -> Result<f64> {
        let (_, freq) = self.interval(table, symbol)?;
        Ok(self.precision_bits as f64 - (freq as f64).log2())
    }
}

fn check_scale(s: f32) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Param(format!("table scale must be positive and finite, got {s}")));
    }
    Ok(())
}

/// Unit-bin pmf over the coder support; the mass below and above the
/// support is folded into the edge symbols.
fn discretized_pmf(
    loc: f64,
    scale: f64,
    bin: fn(f64, f64) -> special::BinMass,
    cdf: fn(f64) -> f64,
) -> Vec<f64> {
    (SUPPORT_MIN..=SUPPORT_MAX)
        .map(|v| {
            let d = v as f64 - loc;
            if v == SUPPORT_MIN {
                cdf((d + 0.5) / scale)
            } else if v == SUPPORT_MAX {
                cdf(-(d - 0.5) / scale)
            } else {
                bin(d, scale).p
            }
        })
        .collect()
}

/// Scale of every hyperprior table, log-spaced in `[1e-3, 64]`.
pub fn scale_bin_values() -> &'static [f64; SCALE_BINS] {
    static VALUES: OnceLock<[f64; SCALE_BINS]> = OnceLock::new();
    VALUES.get_or_init(|| {
        let (lo, hi) = (libm::log(SCALE_BIN_MIN), libm::log(SCALE_BIN_MAX));
        let step = (hi - lo) / (SCALE_BINS - 1) as f64;
        std::array::from_fn(|k| libm::exp(lo + step * k as f64))
    })
}

/// Nearest scale bin in log space.
pub fn scale_bin(sigma: f32) -> usize {
    let (lo, hi) = (libm::log(SCALE_BIN_MIN), libm::log(SCALE_BIN_MAX));
    let step = (hi - lo) / (SCALE_BINS - 1) as f64;
    let s = (sigma as f64).clamp(SCALE_BIN_MIN, SCALE_BIN_MAX);
    let k = ((libm::log(s) - lo) / step).round();
    (k.max(0.0) as usize).min(SCALE_BINS - 1)
}

/// Integer frequencies summing to `2^precision_bits`, every one at least 1.
///
/// Each symbol first receives one count; the remaining budget is split in
/// proportion to `pmf` with largest-remainder rounding (ties go to the lower
/// index).
pub fn quantize_pmf(pmf: &[f64], precision_bits: u32) -> Result<Vec<u32>> {
    let total = 1u64 << precision_bits;
    let n = pmf.len() as u64;
    if n == 0 || n > total || precision_bits > 24 {
        return Err(Error::Param(format!(
            "cannot quantize {n} symbols at {precision_bits} bits"
        )));
    }
    if let Some(bad) = pmf.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Param(format!("pmf entry {bad} is not a finite probability")));
    }
    let sum: f64 = pmf.iter().sum();
    let budget = total - n;
    let mut freqs: Vec<u64> = vec![1; pmf.len()];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(pmf.len());
    let mut assigned = 0u64;
    for (i, &p) in pmf.iter().enumerate() {
        let share = if sum > 0.0 { p / sum * budget as f64 } else { budget as f64 / n as f64 };
        let whole = (share.floor() as u64).min(budget - assigned);
        freqs[i] += whole;
        assigned += whole;
        remainders.push((share - share.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = budget - assigned;
    for &(_, i) in remainders.iter().cycle() {
        if left == 0 {
            break;
        }
        freqs[i] += 1;
        left -= 1;
    }
    Ok(freqs.into_iter().map(|f| f as u32).collect())
}
