use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Orthonormal DCT-II basis, `basis[k * n + i]`.
fn basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for k in 0..n {
        let norm = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            b[k * n + i] = norm * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    b
}

fn planes(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [.., h, w] if x.shape().len() >= 2 => Ok((x.len() / (h * w).max(1), h, w)),
        _ => Err(Error::shape(op, format!("need at least 2 dimensions, got {:?}", x.shape()))),
    }
}

/// `out = A · p · Bᵀ` on one `h × w` plane, or `Aᵀ · p · B` when `inverse`.
fn transform_plane(p: &[f32], out: &mut [f32], bh: &[f64], bw: &[f64], h: usize, w: usize, inverse: bool) {
    let at = |b: &[f64], n: usize, r: usize, c: usize| if inverse { b[c * n + r] } else { b[r * n + c] };
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        for k in 0..w {
            tmp[r * w + k] = (0..w).map(|c| p[r * w + c] as f64 * at(bw, w, k, c)).sum();
        }
    }
    for k in 0..h {
        for c in 0..w {
            out[k * w + c] = (0..h).map(|r| at(bh, h, k, r) * tmp[r * w + c]).sum::<f64>() as f32;
        }
    }
}

fn transform(x: &Tensor, inverse: bool, op: &'static str) -> Result<Tensor> {
    let (n, h, w) = planes(x, op)?;
    let (bh, bw) = (basis(h), basis(w));
    let mut out = vec![0.0f32; x.len()];
    for i in 0..n {
        let r = i * h * w..(i + 1) * h * w;
        transform_plane(&x.data()[r.clone()], &mut out[r], &bh, &bw, h, w, inverse);
    }
    Tensor::new(x.shape(), out)
}

/// Orthonormal 2-D DCT-II of every trailing `H × W` plane.
pub fn dct2(x: &Tensor) -> Result<Tensor> {
    transform(x, false, "dct2")
}

/// Inverse of [`dct2`].
pub fn idct2(x: &Tensor) -> Result<Tensor> {
    transform(x, true, "idct2")
}

/// Keeps only DCT coefficients with `u + v < cutoff` in every plane.
pub fn lowfreq_filter_gradient(g: &Tensor, cutoff: usize) -> Result<Tensor> {
    let (_, h, w) = planes(g, "lowfreq_filter_gradient")?;
    if cutoff >= h + w {
        return Ok(g.clone());
    }
    let mut spec = dct2(g)?.to_vec();
    for plane in spec.chunks_exact_mut(h * w) {
        for u in 0..h {
            for v in 0..w {
                if u + v >= cutoff {
                    plane[u * w + v] = 0.0;
                }
            }
        }
    }
    idct2(&Tensor::new(g.shape(), spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u32) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            (s >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        })
    }

    fn norm(x: &Tensor) -> f64 {
        x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn constant_has_only_dc() {
        let c = dct2(&Tensor::full(&[1, 2, 8, 8], 0.3)).unwrap();
        for plane in c.data().chunks(64) {
            assert!((plane[0] - 2.4).abs() < 1e-5);
            assert!(plane[1..].iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn roundtrip_and_parseval() {
        let x = random(&[2, 3, 32, 16], 1);
        let c = dct2(&x).unwrap();
        let back = idct2(&c).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4, "{err}");
        assert!((norm(&x) - norm(&c)).abs() < 1e-4);
    }

    #[test]
    fn filter_limits() {
        let g = random(&[1, 3, 8, 8], 2);
        assert_eq!(lowfreq_filter_gradient(&g, 16).unwrap(), g);
        let dc = lowfreq_filter_gradient(&g, 1).unwrap();
        for (plane, orig) in dc.data().chunks(64).zip(g.data().chunks(64)) {
            let mean = orig.iter().sum::<f32>() / 64.0;
            assert!(plane.iter().all(|v| (v - mean).abs() < 1e-5));
        }
        assert!(norm(&lowfreq_filter_gradient(&g, 4).unwrap()) <= norm(&g) + 1e-6);
    }
}
