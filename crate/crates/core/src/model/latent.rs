use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest symbol the coder accepts.
pub const SUPPORT_MIN: i32 = -127;
/// Largest symbol the coder accepts.
pub const SUPPORT_MAX: i32 = 127;

/// Integer latent of a single sample, `[C, H, W]` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedLatent {
    shape: [usize; 3],
    values: Vec<i32>,
    /// Per-channel `(min, max)` over the stored values.
    range: Vec<(i32, i32)>,
}

impl QuantizedLatent {
    pub fn new(shape: [usize; 3], values: Vec<i32>) -> Result<Self> {
        let [c, h, w] = shape;
        if c * h * w != values.len() {
            return Err(Error::shape(
                "quantized_latent",
                format!("shape {shape:?} needs {} values, got {}", c * h * w, values.len()),
            ));
        }
        let plane = h * w;
        let range = (0..c)
            .map(|ch| {
                values[ch * plane..(ch + 1) * plane]
                    .iter()
                    .fold((i32::MAX, i32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
            .map(|(lo, hi)| if lo > hi { (0, 0) } else { (lo, hi) })
            .collect();
        Ok(QuantizedLatent { shape, values, range })
    }

    /// Rounds half away from zero and clamps into the coder support.
    pub fn quantize(shape: [usize; 3], continuous: &[f32]) -> Result<Self> {
        let values = continuous.iter().map(|&v| quantize_value(v)).collect();
        Self::new(shape, values)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn channel_range(&self) -> &[(i32, i32)] {
        &self.range
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Channel index of flat element `i`.
    pub fn channel_of(&self, i: usize) -> usize {
        i / (self.shape[1] * self.shape[2]).max(1)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

pub fn quantize_value(v: f32) -> i32 {
    (v.round() as i32).clamp(SUPPORT_MIN, SUPPORT_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_away_and_clamps() {
        let q = QuantizedLatent::quantize([1, 1, 6], &[0.4, 0.5, -0.5, 1.6, 300.0, -1e9]).unwrap();
        assert_eq!(q.values(), &[0, 1, -1, 2, 127, -127]);
        assert_eq!(q.channel_range(), &[(-127, 127)]);
    }

    #[test]
    fn channel_ranges_are_per_channel() {
        let q = QuantizedLatent::new([2, 1, 2], vec![-3, 1, 5, 5]).unwrap();
        assert_eq!(q.channel_range(), &[(-3, 1), (5, 5)]);
        assert_eq!(q.channel_of(2), 1);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(QuantizedLatent::new([2, 2, 2], vec![0; 7]).is_err());
    }
}
