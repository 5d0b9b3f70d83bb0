use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|a − n| / max(|a|, |n|, 1e-6)`.
    pub max_rel_error: f32,
    /// Coordinate that attained it.
    pub worst_index: usize,
    pub analytic: f32,
    pub numeric: f32,
}

/// Compares the backward-pass gradient of the scalar function `f` at
/// `point` with central differences `(f(x+εe_i) − f(x−εe_i)) / 2ε`.
///
/// `f` receives a fresh graph and the variable holding the (possibly
/// perturbed) point, and must return a one-element node.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Param(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.param(point);
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |data: Vec<f32>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(point.shape(), data)?);
        let out = f(&mut g, x)?;
        g.item_f64(out)
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += eps;
        let mut minus = point.to_vec();
        minus[i] -= eps;
        // Divide by the step actually taken after f32 rounding of x ± ε.
        let step = plus[i] as f64 - minus[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic[i] as f64;
        let rel = ((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6)) as f32;
        if rel > report.max_rel_error || rel.is_nan() {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: analytic[i],
                numeric: numeric as f32,
            };
        }
    }
    Ok(report)
}
