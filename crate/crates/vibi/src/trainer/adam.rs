//! Adam updates with bias correction.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::Param;

/// Per-parameter first/second moment buffers plus the shared step counter.
/// Buffers are kept in training precision; the update arithmetic runs at 64
/// bits per element.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Param], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a parameter list:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)` with
/// `m_hat = m / (1 - b1^t)`, `v_hat = v / (1 - b2^t)`.
///
/// `grads` aligns with `params`; `None` entries are treated as zero
/// gradients (the moments still decay). A NaN gradient aborts with a
/// diagnostic naming the parameter.
pub fn adam_step(
    params: &mut [&mut Param],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("adam_step: lr = {lr} must be > 0")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "adam_step: gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!(
                    "adam_step: NaN gradient for parameter {}",
                    p.name
                )));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    for (i, p) in params.iter_mut().enumerate() {
        let n = p.value.numel();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = p.value.data_mut();
        for j in 0..n {
            let g = match &grads[i] {
                Some(gr) => gr.data()[j] as f64,
                None => 0.0,
            };
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            theta[j] = (theta[j] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}
