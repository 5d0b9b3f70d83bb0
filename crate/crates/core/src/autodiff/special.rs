//! Scalar special functions evaluated in `f64`.
//!
//! Built on `libm` rather than the platform math library so that CDF tables
//! derived from them are identical on every target.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Derivative of the logistic sigmoid, `σ(x)·σ(−x)`.
pub fn sigmoid_prime(x: f64) -> f64 {
    let e = libm::exp(-x.abs());
    e / ((1.0 + e) * (1.0 + e))
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / (2.0 * PI).sqrt()
}

/// Probability mass a continuous distribution assigns to the unit bin
/// centred at offset `d` from its location, with derivatives.
///
/// Evaluated on `-|d|` so that the difference of CDFs is taken in the
/// lower tail where it does not cancel.
#[derive(Clone, Copy, Debug)]
pub struct BinMass {
    pub p: f64,
    pub dp_dd: f64,
    pub dp_ds: f64,
}

fn bin_mass(d: f64, s: f64, cdf: impl Fn(f64) -> f64, pdf: impl Fn(f64) -> f64) -> BinMass {
    let t = d.abs();
    let a = (0.5 - t) / s;
    let b = (-0.5 - t) / s;
    let p = cdf(a) - cdf(b);
    let (pa, pb) = (pdf(a), pdf(b));
    let sign = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    BinMass {
        p,
        dp_dd: sign * (pb - pa) / s,
        dp_ds: -(pa * a - pb * b) / s,
    }
}

/// Discretized logistic with scale `s`.
pub fn logistic_bin(d: f64, s: f64) -> BinMass {
    bin_mass(d, s, sigmoid, sigmoid_prime)
}

/// Discretized Gaussian with standard deviation `s`.
pub fn gaussian_bin(d: f64, s: f64) -> BinMass {
    bin_mass(d, s, normal_cdf, normal_pdf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_bin_at_zero_unit_scale() {
        // sigmoid(0.5) - sigmoid(-0.5)
        let want = 1.0 / (1.0 + (-0.5f64).exp()) - 1.0 / (1.0 + 0.5f64.exp());
        let m = logistic_bin(0.0, 1.0);
        assert!((m.p - want).abs() < 1e-12);
        assert!((m.p - 0.244_918_662_403_709).abs() < 1e-12);
    }

    #[test]
    fn bin_masses_sum_to_one() {
        for s in [0.3, 1.0, 4.0] {
            let lsum: f64 = (-200..=200).map(|v| logistic_bin(v as f64 - 0.2, s).p).sum();
            let gsum: f64 = (-200..=200).map(|v| gaussian_bin(v as f64 + 0.3, s).p).sum();
            assert!((lsum - 1.0).abs() < 1e-9, "{lsum}");
            assert!((gsum - 1.0).abs() < 1e-9, "{gsum}");
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for &(d, s) in &[(0.3, 0.7), (-1.7, 1.3), (4.0, 0.9), (-0.2, 2.5)] {
            for f in [logistic_bin as fn(f64, f64) -> BinMass, gaussian_bin] {
                let m = f(d, s);
                let nd = (f(d + h, s).p - f(d - h, s).p) / (2.0 * h);
                let ns = (f(d, s + h).p - f(d, s - h).p) / (2.0 * h);
                assert!((m.dp_dd - nd).abs() < 1e-7, "{} vs {}", m.dp_dd, nd);
                assert!((m.dp_ds - ns).abs() < 1e-7, "{} vs {}", m.dp_ds, ns);
            }
        }
    }

    #[test]
    fn tails_do_not_cancel_to_zero() {
        let m = gaussian_bin(12.0, 1.0);
        assert!(m.p > 0.0 && m.p < 1e-25);
    }
}
