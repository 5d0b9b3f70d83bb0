//! Carry-less 64-bit range coder with byte renormalisation.
//!
//! The coder state is an interval `[low, low + range)` inside a 64-bit
//! window; the window slides by one byte whenever the top byte of both ends
//! agrees. When the interval gets narrow while straddling a byte boundary,
//! the larger side is kept, so no carry can ever propagate into bytes that
//! were already written. The final bytes are the shortest zero-padded value
//! inside the last interval, which makes the encoding canonical: a decoder
//! can verify that a stream is exactly what the encoder would have produced.

use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

/// Shared interval arithmetic of encoder and decoder.
#[derive(Clone, Copy, Debug)]
struct Interval {
    low: u64,
    range: u64,
}

impl Interval {
    fn new() -> Self {
        Interval { low: 0, range: u64::MAX }
    }

    fn narrow(&mut self, start: u32, freq: u32, precision_bits: u32) {
        let r = self.range >> precision_bits;
        self.low += r * start as u64;
        self.range = r * freq as u64;
    }

    fn high(&self) -> u64 {
        self.low + (self.range - 1)
    }

    /// Returns true when the top byte is settled and the window may shift.
    /// Otherwise, if the interval is too narrow, shrinks it to one side of
    /// the byte boundary it straddles and reports whether a shift is now
    /// possible.
    fn settle(&mut self) -> bool {
        if (self.low ^ self.high()) < TOP {
            return true;
        }
        if self.range >= BOT {
            return false;
        }
        let boundary = self.high() & !(TOP - 1);
        let end = self.low + self.range;
        if boundary - self.low >= end - boundary {
            self.range = boundary - self.low;
        } else {
            self.low = boundary;
            self.range = end - boundary;
        }
        true
    }

    fn shift(&mut self) -> u8 {
        let byte = (self.low >> 56) as u8;
        self.low <<= 8;
        self.range = if self.range >= TOP { u64::MAX } else { self.range << 8 };
        byte
    }

    /// Shortest zero-padded value inside the interval: `(value, bytes)`.
    fn flush_value(&self) -> (u64, usize) {
        let (low, high) = (self.low as u128, self.high() as u128);
        for k in 0..8 {
            let unit = 1u128 << (64 - 8 * k);
            let v = low.div_ceil(unit) * unit;
            if v <= high {
                return (v as u64, k);
            }
        }
        (self.low, 8)
    }
}

pub struct RangeEncoder {
    state: Interval,
    precision_bits: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new(precision_bits: u32) -> Self {
        RangeEncoder { state: Interval::new(), precision_bits, out: Vec::new() }
    }

    /// Codes the sub-interval `[start, start + freq)` of `[0, 2^precision)`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && (start as u64 + freq as u64) <= 1 << self.precision_bits);
        self.state.narrow(start, freq, self.precision_bits);
        while self.state.settle() {
            self.out.push(self.state.shift());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let (v, k) = self.state.flush_value();
        self.out.extend_from_slice(&v.to_be_bytes()[..k]);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    state: Interval,
    precision_bits: u32,
    input: &'a [u8],
    pos: usize,
    code: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8], precision_bits: u32) -> Self {
        let mut code = 0u64;
        for i in 0..8 {
            code = (code << 8) | input.get(i).copied().unwrap_or(0) as u64;
        }
        RangeDecoder { state: Interval::new(), precision_bits, input, pos: 8, code }
    }

    /// Decodes one symbol against `cdf` (`cdf[0] = 0`, last entry
    /// `2^precision`); returns its index.
    pub fn decode(&mut self, cdf: &[u32]) -> Result<usize> {
        let offset = self.code - self.state.low;
        let r = self.state.range >> self.precision_bits;
        let target = offset / r;
        if target >= 1 << self.precision_bits {
            return Err(Error::Decode("code value outside the coding interval".into()));
        }
        let target = target as u32;
        let symbol = cdf.partition_point(|&c| c <= target) - 1;
        let (start, freq) = (cdf[symbol], cdf[symbol + 1] - cdf[symbol]);
        self.state.narrow(start, freq, self.precision_bits);
        while self.state.settle() {
            self.check_inside()?;
            self.state.shift();
            if self.pos >= self.input.len() + 8 {
                return Err(Error::Decode("payload exhausted".into()));
            }
            self.code = (self.code << 8) | self.input.get(self.pos).copied().unwrap_or(0) as u64;
            self.pos += 1;
        }
        self.check_inside()?;
        Ok(symbol)
    }

    fn check_inside(&self) -> Result<()> {
        match self.code.checked_sub(self.state.low) {
            Some(d) if d < self.state.range => Ok(()),
            _ => Err(Error::Decode("code value left the coding interval".into())),
        }
    }

    /// Checks that the payload is exactly the canonical encoding of the
    /// symbols decoded so far.
    pub fn finish(self) -> Result<()> {
        let (v, k) = self.state.flush_value();
        let shifted = self.pos - 8;
        if self.input.len() != shifted + k || self.code != v {
            return Err(Error::Decode(format!(
                "payload of {} bytes does not end where the symbols do ({} bytes expected)",
                self.input.len(),
                shifted + k
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cdf(n: u32, precision: u32) -> Vec<u32> {
        (0..=n).map(|i| i * ((1 << precision) / n)).collect()
    }

    fn roundtrip(symbols: &[usize], cdf: &[u32]) -> Vec<u8> {
        let mut enc = RangeEncoder::new(16);
        for &s in symbols {
            enc.encode(cdf[s], cdf[s + 1] - cdf[s]);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes, 16);
        let out: Vec<usize> = symbols.iter().map(|_| dec.decode(cdf).unwrap()).collect();
        dec.finish().unwrap();
        assert_eq!(out, symbols);
        bytes
    }

    #[test]
    fn empty_stream_has_no_bytes() {
        assert!(RangeEncoder::new(16).finish().is_empty());
        RangeDecoder::new(&[], 16).finish().unwrap();
    }

    #[test]
    fn uniform_symbols_cost_eight_bits() {
        let cdf = uniform_cdf(256, 16);
        let symbols: Vec<usize> = (0..1000).map(|i| (i * 89 + 7) % 256).collect();
        let bytes = roundtrip(&symbols, &cdf);
        assert!((1000..=1005).contains(&bytes.len()), "{}", bytes.len());
    }

    #[test]
    fn certain_symbols_are_nearly_free() {
        let mut cdf = vec![0u32];
        for i in 0..255u32 {
            cdf.push(if i < 127 { i + 1 } else { 65536 - (254 - i) });
        }
        assert_eq!(cdf[128] - cdf[127], 65536 - 254);
        let bytes = roundtrip(&vec![127; 1000], &cdf);
        assert!(bytes.len() <= 8, "{}", bytes.len());
    }

    #[test]
    fn truncation_is_detected() {
        let cdf = uniform_cdf(256, 16);
        let symbols: Vec<usize> = (0..64).map(|i| (i * 31) % 256).collect();
        let mut enc = RangeEncoder::new(16);
        for &s in &symbols {
            enc.encode(cdf[s], cdf[s + 1] - cdf[s]);
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() - 3];
        let mut dec = RangeDecoder::new(cut, 16);
        let res: Result<Vec<usize>> = symbols.iter().map(|_| dec.decode(&cdf)).collect();
        assert!(res.is_err() || dec.finish().is_err());
    }

    #[test]
    fn flush_is_shortest() {
        let s = Interval { low: 0x1234_0000_0000_0000, range: 1 << 40 };
        assert_eq!(s.flush_value(), (0x1234_0000_0000_0000, 2));
        let s = Interval { low: 0x1234_0000_0000_0001, range: 1 << 56 };
        assert_eq!(s.flush_value(), (0x1300_0000_0000_0000, 1));
        assert_eq!(Interval::new().flush_value(), (0, 0));
    }
}
