use serde::{Deserialize, Serialize};

use crate::error::UaanError;
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like<P: Parameters>(params: &P) -> Self {
        let m: Vec<Tensor> = params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update of a single tensor. `step` is the
/// already-incremented step number (1 for the first update).
pub fn adam_update(
    value: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), UaanError> {
    if grad.shape() != value.shape() || m.shape() != value.shape() || v.shape() != value.shape() {
        return Err(UaanError::Contract(format!(
            "adam shape mismatch: value {:?}, grad {:?}, m {:?}, v {:?}",
            value.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let (m, v) = (m.data_mut(), v.data_mut());
    for (i, (x, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies one step to every parameter of `params`, in visiting order.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), UaanError> {
    let n = params.params().len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(UaanError::Contract(format!(
            "adam: {n} parameters, {} gradients, {}/{} moments",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let step = state.step;
    let mut result = Ok(());
    let mut i = 0;
    params.visit_mut(&mut |p| {
        if result.is_ok() {
            result = adam_update(&mut p.value, &grads[i], &mut state.m[i], &mut state.v[i], step, lr, cfg)
                .map_err(|e| UaanError::Contract(format!("{}: {e}", p.name())));
        }
        i += 1;
    });
    result
}
