//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Supplies exactly the operator set the explainer, approximator and
//! black-box networks need: elementwise arithmetic and max, scalar ops,
//! matrix multiply, valid 2-D convolution (stride 1), 2x2/3x3 max-pooling,
//! ReLU, axis means, gather/scatter by index, log-softmax, NLL pick, exp
//! and log. 32-bit floats throughout; a 64-bit shadow instantiation backs
//! the gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, Precision, ScalarFn};
pub use graph::{Graph, NodeId};
pub use tensor::{Elem, Tensor, TensorOf};

/// Stable log-softmax of one row, outside any graph.
pub fn log_softmax_slice(row: &[f32], out: &mut [f32]) {
    graph::log_softmax_row(row, out);
}
