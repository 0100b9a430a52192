//! Bias-corrected Adam. Steps *ascend*: callers pass the ELBO gradient.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config(format!(
                "invalid Adam settings lr={lr} beta1={beta1} beta2={beta2} eps={eps}"
            )));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        })
    }
}

/// One ascent step `x ← x + lr · m̂ / (√v̂ + eps)`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} gradients, {} moments",
                params.len(),
                grad.len(),
                state.m.len()
            ),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            iteration: state.t as usize,
            what: "gradient".into(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] += state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
