use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

fn take_grads(params: &mut [&mut Tensor]) -> Result<Vec<Vec<f64>>> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    Ok(params.iter_mut().map(|p| p.take_grad().unwrap()).collect())
}

/// `p ← p − lr·(grad + wd·p)`, then clears every gradient.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    let grads = take_grads(params)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, g) in p.data_mut().iter_mut().zip(g) {
            *w -= lr * (g + weight_decay * *w);
        }
    }
    Ok(())
}

/// First and second moments for [`adam_step`], one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn adam_step(
    params: &mut [&mut Tensor],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: &mut AdamState,
) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::Contract("adam state does not match the parameter list".into()));
    }
    let grads = take_grads(params)?;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, g)) in p.data_mut().iter_mut().zip(g).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
