//! Central-difference gradient checking.
//!
//! The finite-difference side always evaluates on a 64-bit shadow graph;
//! the analytic side runs in the precision under test. Coordinates whose
//! perturbation crosses a branch decision (ReLU sign, max pick, pool argmax,
//! ln/exp guard) are excluded and reported rather than failed.

use super::graph::{Graph, NodeId};
use super::tensor::{Elem, Tensor, TensorOf};
use crate::error::{Error, Result};

/// A differentiable scalar-valued function expressed as a graph builder.
/// `inputs` are pre-inserted leaves; the implementation must return the
/// scalar output node.
pub trait ScalarFn {
    fn build<E: Elem>(&self, g: &mut Graph<E>, inputs: &[NodeId]) -> Result<NodeId>;
}

/// Precision of the analytic gradient under test. Finite differences always
/// run at 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    /// (input index, coordinate, analytic, numeric) at the worst error.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Coordinates excluded because perturbation crossed a kink.
    pub skipped_coords: Vec<(usize, usize)>,
}

fn forward_f64<F: ScalarFn + ?Sized>(
    f: &F,
    inputs: &[TensorOf<f64>],
) -> Result<(f64, u64)> {
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f.build(&mut g, &ids)?;
    let v = g.value(out)?.item()?;
    Ok((v, g.kink_signature()))
}

/// Compare analytic gradients of `f` against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of every input.
pub fn grad_check<F: ScalarFn + ?Sized>(
    f: &F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    precision: Precision,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("grad_check: h = {h} must be > 0")));
    }

    // Analytic side in the precision under test.
    let analytic: Vec<Vec<f64>> = match precision {
        Precision::Single => {
            let mut g: Graph<f32> = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = f.build(&mut g, &ids)?;
            let v = g.value(out)?.item()?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite forward value {v} at the base point"
                )));
            }
            g.backward(out)?;
            ids.iter()
                .zip(inputs)
                .map(|(&id, t)| match g.grad(id).expect("id valid") {
                    Some(gt) => gt.data().iter().map(|&x| x as f64).collect(),
                    None => vec![0.0; t.numel()],
                })
                .collect()
        }
        Precision::Double => {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .map(|t| g.leaf(t.cast::<f64>(), true))
                .collect();
            let out = f.build(&mut g, &ids)?;
            let v = g.value(out)?.item()?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite forward value {v} at the base point"
                )));
            }
            g.backward(out)?;
            ids.iter()
                .zip(inputs)
                .map(|(&id, t)| match g.grad(id).expect("id valid") {
                    Some(gt) => gt.data().to_vec(),
                    None => vec![0.0; t.numel()],
                })
                .collect()
        }
    };

    let base: Vec<TensorOf<f64>> = inputs.iter().map(|t| t.cast::<f64>()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        tol,
        checked: 0,
        skipped: 0,
        passed: true,
        worst: None,
        skipped_coords: Vec::new(),
    };

    for (ti, t) in base.iter().enumerate() {
        for ci in 0..t.numel() {
            let mut plus = base.clone();
            plus[ti].data_mut()[ci] += h;
            let (fp, sig_p) = forward_f64(f, &plus)?;

            let mut minus = base.clone();
            minus[ti].data_mut()[ci] -= h;
            let (fm, sig_m) = forward_f64(f, &minus)?;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite forward value at input {ti} coordinate {ci} \
                     (f+ = {fp}, f- = {fm})"
                )));
            }
            if sig_p != sig_m {
                report.skipped += 1;
                report.skipped_coords.push((ti, ci));
                continue;
            }

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ci, a, numeric));
            }
        }
    }

    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumRelu;
    impl ScalarFn for SumRelu {
        fn build<E: Elem>(&self, g: &mut Graph<E>, inputs: &[NodeId]) -> Result<NodeId> {
            let r = g.relu(inputs[0])?;
            g.sum_all(r)
        }
    }

    struct LogSoftmaxNll(Vec<usize>);
    impl ScalarFn for LogSoftmaxNll {
        fn build<E: Elem>(&self, g: &mut Graph<E>, inputs: &[NodeId]) -> Result<NodeId> {
            let lsm = g.log_softmax(inputs[0])?;
            let nll = g.nll_pick(lsm, &self.0)?;
            g.mean_all(nll)
        }
    }

    #[test]
    fn relu_linear_region_passes_tight() {
        let x = Tensor::from_vec(vec![0.5, 1.25, 2.0, 3.5]);
        let r = grad_check(&SumRelu, &[x], 1e-3, 1e-4, Precision::Single).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_err);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn log_softmax_nll_passes() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1, 1.4, -2.2]).unwrap();
        let r = grad_check(&LogSoftmaxNll(vec![2, 0]), &[x], 1e-3, 1e-3, Precision::Single)
            .unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_err);
        let x2 = Tensor::new(vec![2, 4], vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1, 1.4, -2.2]).unwrap();
        let r64 = grad_check(&LogSoftmaxNll(vec![2, 0]), &[x2], 1e-5, 1e-6, Precision::Double)
            .unwrap();
        assert!(r64.passed, "max rel err {}", r64.max_rel_err);
    }

    #[test]
    fn kink_coordinate_excluded_not_failed() {
        // x[1] sits exactly on the ReLU kink
        let x = Tensor::from_vec(vec![1.0, 0.0, -2.0]);
        let r = grad_check(&SumRelu, &[x], 1e-3, 1e-4, Precision::Single).unwrap();
        assert!(r.passed);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.skipped_coords, vec![(0, 1)]);
    }

    #[test]
    fn bad_step_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(&SumRelu, &[x], 0.0, 1e-4, Precision::Single).is_err());
    }
}
