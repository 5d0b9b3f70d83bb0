use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        SgdState { velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }
}

fn check_shapes(params: &ParamSet, grads: &[Vec<f32>], state: &[Vec<f32>]) -> Result<()> {
    if grads.len() != params.len() || state.len() != params.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} params, {} grads, {} state buffers", params.len(), grads.len(), state.len()),
        ));
    }
    for (i, ((name, t), g)) in params.iter().zip(grads).enumerate() {
        if g.len() != t.len() || state[i].len() != t.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{name}: {} values, grad {}, state {}", t.len(), g.len(), state[i].len()),
            ));
        }
    }
    Ok(())
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f32,
    (beta1, beta2): (f32, f32),
    eps: f32,
) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    check_shapes(params, grads, &state.v)?;
    state.step += 1;
    let bc1 = 1.0 - (beta1 as f64).powi(state.step as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(state.step as i32);
    for i in 0..params.len() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let updated: Vec<f32> = params
            .tensor(i)
            .data()
            .iter()
            .zip(&grads[i])
            .enumerate()
            .map(|(j, (&p, &g))| {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                (p as f64 - lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32
            })
            .collect();
        params.set(i, updated)?;
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &[Vec<f32>],
    state: &mut SgdState,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    for i in 0..params.len() {
        let vel = &mut state.velocity[i];
        let updated: Vec<f32> = params
            .tensor(i)
            .data()
            .iter()
            .zip(&grads[i])
            .enumerate()
            .map(|(j, (&p, &g))| {
                vel[j] = momentum * vel[j] + g;
                p - lr * vel[j]
            })
            .collect();
        params.set(i, updated)?;
    }
    Ok(())
}
