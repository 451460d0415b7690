//! The training objective: Monte-Carlo approximator negative log-likelihood
//! plus `beta` times an analytic KL between the explainer's chunk
//! distribution and the uniform prior over chunks.
//!
//! With the uniform prior the KL has the closed form
//! `sum_j p_j * ln(p_j * d) = ln d - H(p)`, so the compressiveness term is an
//! entropy bonus on the attribution scores. At `beta = 0` the objective
//! reduces to the cross-entropy-only loss.

use crate::diffcore::{Elem, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Tolerance on `sum(p) == 1` for probability-vector inputs.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Components of one training loss evaluation. `total == nll + beta * kl`
/// exactly, in 32-bit arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub nll: f32,
    pub kl: f32,
    pub beta: f32,
    pub total: f32,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }
}

/// KL divergence from a categorical `p` over `d` outcomes to the uniform
/// distribution: `sum_j p_j ln(p_j d)`, with `0 ln 0 := 0`. Accumulated at
/// 64 bits.
pub fn kl_to_uniform(p: &[f32]) -> Result<f64> {
    let d = p.len();
    if d == 0 {
        return Err(Error::InvalidArgument("kl_to_uniform: empty distribution".into()));
    }
    let mut sum = 0.0f64;
    for (j, &pj) in p.iter().enumerate() {
        if pj.is_nan() || pj < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kl_to_uniform: p[{j}] = {pj} is negative or NaN"
            )));
        }
        sum += pj as f64;
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidArgument(format!(
            "kl_to_uniform: probabilities sum to {sum}, expected 1 within {NORMALIZATION_TOL}"
        )));
    }
    let ln_d = (d as f64).ln();
    let mut kl = 0.0f64;
    for &pj in p {
        let pj = pj as f64;
        if pj > 0.0 {
            kl += pj * (pj.ln() + ln_d);
        }
    }
    // clamp tiny negative round-off; the divergence is nonnegative
    Ok(kl.max(0.0))
}

/// Assemble loss terms from already-computed network outputs.
///
/// `approx_log_probs` holds `n * L` rows of class log-probabilities, grouped
/// as `L` consecutive blocks of `n` rows (one block per mask draw).
/// `targets` are the black-box labels for the `n` instances.
/// `explainer_probs` holds `n` rows of chunk probabilities.
pub fn vibi_loss(
    approx_log_probs: &Tensor,
    targets: &[usize],
    explainer_probs: &Tensor,
    beta: f32,
) -> Result<LossTerms> {
    if beta < 0.0 {
        return Err(Error::InvalidArgument(format!("vibi_loss: beta = {beta} < 0")));
    }
    let alp_shape = approx_log_probs.shape();
    let ep_shape = explainer_probs.shape();
    if alp_shape.len() != 2 || ep_shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "vibi_loss: expected rank-2 inputs, got {:?} and {:?}",
            alp_shape, ep_shape
        )));
    }
    let n = ep_shape[0];
    let classes = alp_shape[1];
    if n == 0 || targets.len() != n || !alp_shape[0].is_multiple_of(n) {
        return Err(Error::InvalidArgument(format!(
            "vibi_loss: {} log-prob rows, {} instances, {} targets",
            alp_shape[0],
            n,
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::InvalidArgument(format!(
            "vibi_loss: target {bad} out of range for {classes} classes"
        )));
    }
    let l = alp_shape[0] / n;

    let mut nll_sum = 0.0f64;
    for block in 0..l {
        for (i, &t) in targets.iter().enumerate() {
            nll_sum -= approx_log_probs.data()[((block * n) + i) * classes + t] as f64;
        }
    }
    let nll = (nll_sum / (n * l) as f64) as f32;

    let mut kl_sum = 0.0f64;
    for i in 0..n {
        let row = &explainer_probs.data()[i * ep_shape[1]..(i + 1) * ep_shape[1]];
        kl_sum += kl_to_uniform(row)?;
    }
    let kl = (kl_sum / n as f64) as f32;

    let total = nll + beta * kl;
    Ok(LossTerms { nll, kl, beta, total })
}

/// Node handles of a loss built in a graph.
pub struct LossNodes {
    pub total: NodeId,
    pub nll: NodeId,
    /// Absent when the KL branch was not built (cross-entropy-only mode).
    pub kl: Option<NodeId>,
}

/// Build the loss in a graph for training.
///
/// `approx_log_probs` holds one `[N, classes]` node per mask draw;
/// `explainer_log_probs` is the `[N, d]` log-softmax output of the
/// explainer. With `kl_weight = None` the KL branch is not constructed at
/// all (the cross-entropy-only objective); with `Some(beta)` the full
/// objective is built, including `beta = 0`.
pub fn build_loss_graph<E: Elem>(
    g: &mut Graph<E>,
    approx_log_probs: &[NodeId],
    targets: &[usize],
    explainer_log_probs: NodeId,
    kl_weight: Option<f64>,
) -> Result<LossNodes> {
    if approx_log_probs.is_empty() {
        return Err(Error::InvalidArgument("build_loss_graph: no mask draws".into()));
    }
    if let Some(beta) = kl_weight {
        if beta < 0.0 {
            return Err(Error::InvalidArgument(format!("build_loss_graph: beta = {beta} < 0")));
        }
    }
    let l = approx_log_probs.len();
    let mut nll = {
        let picked = g.nll_pick(approx_log_probs[0], targets)?;
        g.mean_all(picked)?
    };
    for &alp in &approx_log_probs[1..] {
        let picked = g.nll_pick(alp, targets)?;
        let m = g.mean_all(picked)?;
        nll = g.add(nll, m)?;
    }
    if l > 1 {
        nll = g.mul_scalar(nll, E::from_f64(1.0 / l as f64))?;
    }

    match kl_weight {
        None => Ok(LossNodes { total: nll, nll, kl: None }),
        Some(beta) => {
            let d = *g
                .value(explainer_log_probs)?
                .shape()
                .last()
                .ok_or_else(|| Error::InvalidArgument("build_loss_graph: rank-0 explainer output".into()))?;
            let p = g.exp(explainer_log_probs)?;
            let shifted = g.add_scalar(explainer_log_probs, E::from_f64((d as f64).ln()))?;
            let terms = g.mul(p, shifted)?;
            let row_mean = g.mean_axis(terms, 1)?;
            let row_sum = g.mul_scalar(row_mean, E::from_f64(d as f64))?;
            let kl = g.mean_all(row_sum)?;
            let weighted = g.mul_scalar(kl, E::from_f64(beta))?;
            let total = g.add(nll, weighted)?;
            Ok(LossNodes { total, nll, kl: Some(kl) })
        }
    }
}
