//! Reverse-mode computation graph over dense tensors.
//!
//! Operations are recorded in construction order; `backward` replays them in
//! exact reverse order, accumulating gradients additively across fan-out.
//! Every kernel has a fixed reduction order per output element, so results
//! are bit-identical regardless of thread count (parallelism only splits
//! independent output slices).

use rayon::prelude::*;

use super::tensor::{Elem, TensorOf};
use crate::error::{Error, Result};

/// Identity of a node within one `Graph`. Ids from other graphs are not
/// interchangeable; out-of-range ids produce lookup errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Work threshold below which kernels stay sequential. Parallel and
/// sequential paths compute identical bits; this only affects scheduling.
const PAR_THRESHOLD: usize = 16_384;

#[derive(Debug, Clone)]
enum Op {
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    EMax { a: NodeId, b: NodeId },
    AddScalar { x: NodeId },
    MulScalar { x: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    MaxPool { x: NodeId, size: usize },
    Relu { x: NodeId },
    MeanAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    Gather { x: NodeId, idx: std::sync::Arc<Vec<usize>> },
    ScatterAdd { x: NodeId, idx: std::sync::Arc<Vec<usize>>, width: usize },
    LogSoftmax { x: NodeId },
    NllPick { x: NodeId, targets: std::sync::Arc<Vec<usize>> },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Reshape { x: NodeId },
}

struct Node<E: Elem> {
    value: TensorOf<E>,
    requires_grad: bool,
    /// Scalar attribute for AddScalar/MulScalar records producing this node.
    scalar: E,
}

struct Record {
    op: Op,
    out: NodeId,
}

/// A single-threaded reverse-mode tape. Independent graphs may live on
/// different threads; one graph is never shared.
pub struct Graph<E: Elem = f32> {
    nodes: Vec<Node<E>>,
    records: Vec<Record>,
    grads: Vec<Option<TensorOf<E>>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Insert a leaf tensor. Only leaves with `requires_grad` (and nodes
    /// downstream of them) receive gradients.
    pub fn leaf(&mut self, value: TensorOf<E>, requires_grad: bool) -> NodeId {
        self.push_node(value, requires_grad, E::ZERO)
    }

    pub fn value(&self, id: NodeId) -> Result<&TensorOf<E>> {
        self.check(id)?;
        Ok(&self.nodes[id.index()].value)
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Result<Option<&TensorOf<E>>> {
        self.check(id)?;
        Ok(self.grads.get(id.index()).and_then(|g| g.as_ref()))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.index() >= self.nodes.len() {
            return Err(Error::Lookup(format!(
                "node {} not in graph ({} nodes)",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push_node(&mut self, value: TensorOf<E>, requires_grad: bool, scalar: E) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            requires_grad,
            scalar,
        });
        id
    }

    fn push_op(&mut self, op: Op, value: TensorOf<E>, requires_grad: bool, scalar: E) -> NodeId {
        let out = self.push_node(value, requires_grad, scalar);
        self.records.push(Record { op, out });
        out
    }

    fn val(&self, id: NodeId) -> &TensorOf<E> {
        &self.nodes[id.index()].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::InvalidArgument(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x + y);
        let value = TensorOf::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_op(Op::Add { a, b }, value, rg, E::ZERO))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x - y);
        let value = TensorOf::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_op(Op::Sub { a, b }, value, rg, E::ZERO))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x * y);
        let value = TensorOf::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_op(Op::Mul { a, b }, value, rg, E::ZERO))
    }

    /// Elementwise maximum. Backward routes each coordinate's gradient to a
    /// single branch: `a` on ties (first operand wins).
    pub fn emax(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(a, b, "emax")?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x.maximum(y));
        let value = TensorOf::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_op(Op::EMax { a, b }, value, rg, E::ZERO))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: E) -> Result<NodeId> {
        self.check(x)?;
        let data = self.val(x).data().iter().map(|&v| v + s).collect();
        let value = TensorOf::new(self.val(x).shape().to_vec(), data)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::AddScalar { x }, value, rg, s))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: E) -> Result<NodeId> {
        self.check(x)?;
        let data = self.val(x).data().iter().map(|&v| v * s).collect();
        let value = TensorOf::new(self.val(x).shape().to_vec(), data)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::MulScalar { x }, value, rg, s))
    }

    /// Row-wise bias addition: `x` is interpreted as rows of length
    /// `b.numel()`. The one sanctioned non-scalar broadcast, used by the
    /// dense layer.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(b)?;
        let m = self.val(b).numel();
        if self.val(b).shape().len() != 1 {
            return Err(Error::InvalidArgument(
                "add_bias: bias must be rank 1".into(),
            ));
        }
        if !self.val(x).numel().is_multiple_of(m) || *self.val(x).shape().last().unwrap_or(&0) != m {
            return Err(Error::InvalidArgument(format!(
                "add_bias: trailing axis of {:?} must equal bias length {}",
                self.val(x).shape(),
                m
            )));
        }
        let bias = self.val(b).data().to_vec();
        let data = self
            .val(x)
            .data()
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(&bias).map(|(&v, &w)| v + w))
            .collect();
        let value = TensorOf::new(self.val(x).shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push_op(Op::AddBias { x, b }, value, rg, E::ZERO))
    }

    // ---- linear algebra --------------------------------------------------

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::InvalidArgument(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; n * m];
        matmul_into(self.val(a).data(), self.val(b).data(), &mut out, n, k, m);
        let value = TensorOf::new(vec![n, m], out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push_op(Op::Matmul { a, b }, value, rg, E::ZERO))
    }

    /// Valid 2-D convolution, stride 1. `x: [N,C,H,W]`, `w: [F,C,kh,kw]`,
    /// `b: [F]` -> `[N,F,H-kh+1,W-kw+1]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: expected x[N,C,H,W], w[F,C,kh,kw], b[F]; got {:?}, {:?}, {:?}",
                sx, sw, sb
            )));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cw != c || sb[0] != f || kh > h || kw > wd {
            return Err(Error::InvalidArgument(format!(
                "conv2d: incompatible shapes x{:?} w{:?} b{:?}",
                sx, sw, sb
            )));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![E::ZERO; n * f * oh * ow];
        conv2d_forward(
            self.val(x).data(),
            self.val(w).data(),
            self.val(b).data(),
            &mut out,
            ConvDims { n, c, h, w: wd, f, kh, kw },
        );
        let value = TensorOf::new(vec![n, f, oh, ow], out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push_op(Op::Conv2d { x, w, b }, value, rg, E::ZERO))
    }

    /// Max-pool with square window and stride equal to the window size.
    /// Spatial dims must divide exactly.
    pub fn max_pool(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.val(x).shape();
        if sx.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "max_pool: expected [N,C,H,W], got {:?}",
                sx
            )));
        }
        if !(1..=3).contains(&size) {
            return Err(Error::InvalidArgument(format!(
                "max_pool: unsupported window {size}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % size != 0 || w % size != 0 {
            return Err(Error::InvalidArgument(format!(
                "max_pool: {h}x{w} not divisible by window {size}"
            )));
        }
        let (oh, ow) = (h / size, w / size);
        let mut out = vec![E::ZERO; n * c * oh * ow];
        for img in 0..n * c {
            let src = &self.val(x).data()[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = src[oy * size * w + ox * size];
                    for ky in 0..size {
                        for kx in 0..size {
                            let v = src[(oy * size + ky) * w + ox * size + kx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                }
            }
        }
        let value = TensorOf::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::MaxPool { x, size }, value, rg, E::ZERO))
    }

    // ---- activations and reductions ---------------------------------------

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| if v > E::ZERO { v } else { E::ZERO })
            .collect();
        let value = TensorOf::new(self.val(x).shape().to_vec(), data)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::Relu { x }, value, rg, E::ZERO))
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.val(x).shape().to_vec();
        if axis >= sx.len() {
            return Err(Error::InvalidArgument(format!(
                "mean_axis: axis {axis} out of range for shape {:?}",
                sx
            )));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let mut out = vec![E::ZERO; outer * inner];
        let inv = E::ONE / E::from_f64(n as f64);
        let src = self.val(x).data();
        for o in 0..outer {
            for i in 0..inner {
                let mut s = E::ZERO;
                for j in 0..n {
                    s += src[(o * n + j) * inner + i];
                }
                out[o * inner + i] = s * inv;
            }
        }
        let mut oshape = sx.clone();
        oshape.remove(axis);
        let value = TensorOf::new(oshape, out)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::MeanAxis { x, axis }, value, rg, E::ZERO))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let mut s = E::ZERO;
        for &v in self.val(x).data() {
            s += v;
        }
        let rg = self.needs(x);
        Ok(self.push_op(Op::SumAll { x }, TensorOf::scalar(s), rg, E::ZERO))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let mut s = E::ZERO;
        for &v in self.val(x).data() {
            s += v;
        }
        let n = E::from_f64(self.val(x).numel() as f64);
        let rg = self.needs(x);
        Ok(self.push_op(Op::MeanAll { x }, TensorOf::scalar(s / n), rg, E::ZERO))
    }

    /// Gather along the last axis: `out[r, i] = x[r, idx[i]]`.
    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.val(x).shape().to_vec();
        let m = *sx.last().ok_or_else(|| {
            Error::InvalidArgument("gather: rank-0 input".into())
        })?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather: empty index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "gather: index {bad} out of range for axis length {m}"
            )));
        }
        let rows = self.val(x).numel() / m;
        let mut out = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = &self.val(x).data()[r * m..(r + 1) * m];
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut oshape = sx.clone();
        *oshape.last_mut().unwrap() = idx.len();
        let value = TensorOf::new(oshape, out)?;
        let rg = self.needs(x);
        let idx = std::sync::Arc::new(idx.to_vec());
        Ok(self.push_op(Op::Gather { x, idx }, value, rg, E::ZERO))
    }

    /// Scatter-add along the last axis into `width` slots:
    /// `out[r, idx[i]] += x[r, i]` with a fixed left-to-right order.
    pub fn scatter_add(&mut self, x: NodeId, idx: &[usize], width: usize) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.val(x).shape().to_vec();
        let m = *sx.last().ok_or_else(|| {
            Error::InvalidArgument("scatter_add: rank-0 input".into())
        })?;
        if idx.len() != m {
            return Err(Error::InvalidArgument(format!(
                "scatter_add: index length {} != trailing axis {}",
                idx.len(),
                m
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(Error::InvalidArgument(format!(
                "scatter_add: index {bad} out of range for width {width}"
            )));
        }
        let rows = self.val(x).numel() / m;
        let mut out = vec![E::ZERO; rows * width];
        for r in 0..rows {
            let row = &self.val(x).data()[r * m..(r + 1) * m];
            let dst = &mut out[r * width..(r + 1) * width];
            for (i, &j) in idx.iter().enumerate() {
                dst[j] += row[i];
            }
        }
        let mut oshape = sx.clone();
        *oshape.last_mut().unwrap() = width;
        let value = TensorOf::new(oshape, out)?;
        let rg = self.needs(x);
        let idx = std::sync::Arc::new(idx.to_vec());
        Ok(self.push_op(Op::ScatterAdd { x, idx, width }, value, rg, E::ZERO))
    }

    /// Log-softmax over the last axis, computed with max-subtraction.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.val(x).shape().to_vec();
        let m = *sx.last().ok_or_else(|| {
            Error::InvalidArgument("log_softmax: rank-0 input".into())
        })?;
        if m == 0 {
            return Err(Error::InvalidArgument("log_softmax: empty axis".into()));
        }
        let rows = self.val(x).numel() / m;
        let mut out = vec![E::ZERO; rows * m];
        for r in 0..rows {
            let row = &self.val(x).data()[r * m..(r + 1) * m];
            log_softmax_row(row, &mut out[r * m..(r + 1) * m]);
        }
        let value = TensorOf::new(sx, out)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::LogSoftmax { x }, value, rg, E::ZERO))
    }

    /// Negative log-likelihood pick: `out[n] = -x[n, targets[n]]` for
    /// log-probability rows `x: [N, C]`.
    pub fn nll_pick(&mut self, x: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.val(x).shape();
        if sx.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "nll_pick: expected [N,C], got {:?}",
                sx
            )));
        }
        let (n, c) = (sx[0], sx[1]);
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "nll_pick: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "nll_pick: target {bad} out of range for {c} classes"
            )));
        }
        let src = self.val(x).data();
        let out: Vec<E> = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -src[r * c + t])
            .collect();
        let value = TensorOf::new(vec![n], out)?;
        let rg = self.needs(x);
        let targets = std::sync::Arc::new(targets.to_vec());
        Ok(self.push_op(Op::NllPick { x, targets }, value, rg, E::ZERO))
    }

    /// Exponential, saturating at `E::EXP_SATURATION` to keep outputs finite.
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| if v > E::EXP_SATURATION { E::EXP_SATURATION.exp() } else { v.exp() })
            .collect();
        let value = TensorOf::new(self.val(x).shape().to_vec(), data)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::Exp { x }, value, rg, E::ZERO))
    }

    /// Natural log with inputs floored at `E::LN_FLOOR`.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| if v < E::LN_FLOOR { E::LN_FLOOR.ln() } else { v.ln() })
            .collect();
        let value = TensorOf::new(self.val(x).shape().to_vec(), data)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::Ln { x }, value, rg, E::ZERO))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let value = self.val(x).reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push_op(Op::Reshape { x }, value, rg, E::ZERO))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Seeds gradient 1.0 at `loss`,
    /// traverses records in exact reverse order, accumulates additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.index()].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.index()].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.nodes[loss.index()].value.shape().to_vec();
        self.grads[loss.index()] = Some(
            TensorOf::new(seed_shape, vec![E::ONE]).expect("scalar seed"),
        );

        for ri in (0..self.records.len()).rev() {
            let out = self.records[ri].out;
            if !self.nodes[out.index()].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[out.index()].take() else {
                continue;
            };
            let op = self.records[ri].op.clone();
            self.backward_op(&op, out, &dy);
            self.grads[out.index()] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, shape: &[usize], f: impl FnOnce(&mut [E])) {
        if !self.nodes[id.index()].requires_grad {
            return;
        }
        if self.grads[id.index()].is_none() {
            self.grads[id.index()] = Some(TensorOf::zeros(shape.to_vec()));
        }
        f(self.grads[id.index()].as_mut().unwrap().data_mut());
    }

    fn backward_op(&mut self, op: &Op, out: NodeId, dy_t: &TensorOf<E>) {
        let dy = dy_t.data();
        match op {
            Op::Add { a, b } => {
                let sa = self.val(*a).shape().to_vec();
                self.accumulate(*a, &sa, |g| axpy(g, dy, E::ONE));
                let sb = self.val(*b).shape().to_vec();
                self.accumulate(*b, &sb, |g| axpy(g, dy, E::ONE));
            }
            Op::Sub { a, b } => {
                let sa = self.val(*a).shape().to_vec();
                self.accumulate(*a, &sa, |g| axpy(g, dy, E::ONE));
                let sb = self.val(*b).shape().to_vec();
                self.accumulate(*b, &sb, |g| axpy(g, dy, -E::ONE));
            }
            Op::Mul { a, b } => {
                let av = self.val(*a).data().to_vec();
                let bv = self.val(*b).data().to_vec();
                let sa = self.val(*a).shape().to_vec();
                self.accumulate(*a, &sa, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                let sb = self.val(*b).shape().to_vec();
                self.accumulate(*b, &sb, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::EMax { a, b } => {
                let av = self.val(*a).data().to_vec();
                let bv = self.val(*b).data().to_vec();
                // single-branch routing, first operand wins exact ties
                let a_wins: Vec<bool> =
                    av.iter().zip(&bv).map(|(x, y)| x >= y).collect();
                let sa = self.val(*a).shape().to_vec();
                self.accumulate(*a, &sa, |g| {
                    for i in 0..g.len() {
                        if a_wins[i] {
                            g[i] += dy[i];
                        }
                    }
                });
                let sb = self.val(*b).shape().to_vec();
                self.accumulate(*b, &sb, |g| {
                    for i in 0..g.len() {
                        if !a_wins[i] {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::AddScalar { x } => {
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| axpy(g, dy, E::ONE));
            }
            Op::MulScalar { x } => {
                let s = self.nodes[out.index()].scalar;
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| axpy(g, dy, s));
            }
            Op::AddBias { x, b } => {
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| axpy(g, dy, E::ONE));
                let m = self.val(*b).numel();
                let sb = self.val(*b).shape().to_vec();
                self.accumulate(*b, &sb, |g| {
                    for row in dy.chunks_exact(m) {
                        for i in 0..m {
                            g[i] += row[i];
                        }
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (n, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let m = self.val(*b).shape()[1];
                let av = self.val(*a).data().to_vec();
                let bv = self.val(*b).data().to_vec();
                let sa = self.val(*a).shape().to_vec();
                // dA = dY . B^T
                self.accumulate(*a, &sa, |g| {
                    run_rows(g, k, n * k * m, |r, row| {
                        for j in 0..m {
                            let d = dy[r * m + j];
                            if d != E::ZERO {
                                for kk in 0..k {
                                    row[kk] += d * bv[kk * m + j];
                                }
                            }
                        }
                    });
                });
                let sb = self.val(*b).shape().to_vec();
                // dB = A^T . dY, parallel over rows of dB (fixed n-order inside)
                self.accumulate(*b, &sb, |g| {
                    run_rows(g, m, n * k * m, |kk, row| {
                        for r in 0..n {
                            let s = av[r * k + kk];
                            if s != E::ZERO {
                                let dr = &dy[r * m..(r + 1) * m];
                                for j in 0..m {
                                    row[j] += s * dr[j];
                                }
                            }
                        }
                    });
                });
            }
            Op::Conv2d { x, w, b } => {
                let sx = self.val(*x).shape().to_vec();
                let sw = self.val(*w).shape().to_vec();
                let dims = ConvDims {
                    n: sx[0],
                    c: sx[1],
                    h: sx[2],
                    w: sx[3],
                    f: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                };
                let xv = self.val(*x).data().to_vec();
                let wv = self.val(*w).data().to_vec();
                self.accumulate(*x, &sx, |g| conv2d_backward_input(g, dy, &wv, dims));
                self.accumulate(*w, &sw, |g| conv2d_backward_weight(g, dy, &xv, dims));
                let sb = self.val(*b).shape().to_vec();
                let (oh, ow) = (dims.h - dims.kh + 1, dims.w - dims.kw + 1);
                self.accumulate(*b, &sb, |g| {
                    for img in 0..dims.n {
                        for fi in 0..dims.f {
                            let base = (img * dims.f + fi) * oh * ow;
                            let mut s = E::ZERO;
                            for &d in &dy[base..base + oh * ow] {
                                s += d;
                            }
                            g[fi] += s;
                        }
                    }
                });
            }
            Op::MaxPool { x, size } => {
                let sx = self.val(*x).shape().to_vec();
                let (h, w) = (sx[2], sx[3]);
                let (oh, ow) = (h / size, w / size);
                let xv = self.val(*x).data().to_vec();
                self.accumulate(*x, &sx, |g| {
                    for img in 0..sx[0] * sx[1] {
                        let src = &xv[img * h * w..(img + 1) * h * w];
                        let dsrc = &dy[img * oh * ow..(img + 1) * oh * ow];
                        let gdst = &mut g[img * h * w..(img + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                // first-encountered argmax in scan order
                                let (mut by, mut bx) = (0, 0);
                                let mut best = src[oy * size * w + ox * size];
                                for ky in 0..*size {
                                    for kx in 0..*size {
                                        let v = src[(oy * size + ky) * w + ox * size + kx];
                                        if v > best {
                                            best = v;
                                            by = ky;
                                            bx = kx;
                                        }
                                    }
                                }
                                gdst[(oy * size + by) * w + ox * size + bx] +=
                                    dsrc[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.val(*x).data().to_vec();
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| {
                    for i in 0..g.len() {
                        if xv[i] > E::ZERO {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let sx = self.val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&sx, *axis);
                let inv = E::ONE / E::from_f64(n as f64);
                self.accumulate(*x, &sx, |g| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                g[(o * n + j) * inner + i] += dy[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| {
                    for gi in g.iter_mut() {
                        *gi += dy[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let sx = self.val(*x).shape().to_vec();
                let inv = E::ONE / E::from_f64(self.val(*x).numel() as f64);
                self.accumulate(*x, &sx, |g| {
                    for gi in g.iter_mut() {
                        *gi += dy[0] * inv;
                    }
                });
            }
            Op::Gather { x, idx } => {
                let sx = self.val(*x).shape().to_vec();
                let m = *sx.last().unwrap();
                let rows = self.val(*x).numel() / m;
                let k = idx.len();
                self.accumulate(*x, &sx, |g| {
                    for r in 0..rows {
                        let drow = &dy[r * k..(r + 1) * k];
                        let grow = &mut g[r * m..(r + 1) * m];
                        for (i, &j) in idx.iter().enumerate() {
                            grow[j] += drow[i];
                        }
                    }
                });
            }
            Op::ScatterAdd { x, idx, width } => {
                let sx = self.val(*x).shape().to_vec();
                let m = *sx.last().unwrap();
                let rows = self.val(*x).numel() / m;
                self.accumulate(*x, &sx, |g| {
                    for r in 0..rows {
                        let drow = &dy[r * width..(r + 1) * width];
                        let grow = &mut g[r * m..(r + 1) * m];
                        for (i, &j) in idx.iter().enumerate() {
                            grow[i] += drow[j];
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let yv = self.nodes[out.index()].value.data().to_vec();
                let sx = self.val(*x).shape().to_vec();
                let m = *sx.last().unwrap();
                let rows = yv.len() / m;
                self.accumulate(*x, &sx, |g| {
                    for r in 0..rows {
                        let dr = &dy[r * m..(r + 1) * m];
                        let yr = &yv[r * m..(r + 1) * m];
                        let mut dsum = E::ZERO;
                        for &d in dr {
                            dsum += d;
                        }
                        let gr = &mut g[r * m..(r + 1) * m];
                        for i in 0..m {
                            gr[i] += dr[i] - yr[i].exp() * dsum;
                        }
                    }
                });
            }
            Op::NllPick { x, targets } => {
                let sx = self.val(*x).shape().to_vec();
                let c = sx[1];
                self.accumulate(*x, &sx, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        g[r * c + t] += -dy[r];
                    }
                });
            }
            Op::Exp { x } => {
                let xv = self.val(*x).data().to_vec();
                let yv = self.nodes[out.index()].value.data().to_vec();
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| {
                    for i in 0..g.len() {
                        if xv[i] <= E::EXP_SATURATION {
                            g[i] += dy[i] * yv[i];
                        }
                    }
                });
            }
            Op::Ln { x } => {
                let xv = self.val(*x).data().to_vec();
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| {
                    for i in 0..g.len() {
                        if xv[i] >= E::LN_FLOOR {
                            g[i] += dy[i] / xv[i];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                let sx = self.val(*x).shape().to_vec();
                self.accumulate(*x, &sx, |g| axpy(g, dy, E::ONE));
            }
        }
    }

    /// Hash of every data-dependent branch decision (ReLU signs, max picks,
    /// pool argmaxes, ln/exp guard hits) in the current forward values.
    /// grad_check compares signatures at perturbed points to detect kink
    /// crossings and skip those coordinates.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 0x9e37_79b9_7f4a_7c15;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for rec in &self.records {
            match &rec.op {
                Op::Relu { x } => {
                    for &v in self.val(*x).data() {
                        feed(v > E::ZERO);
                    }
                }
                Op::EMax { a, b } => {
                    let av = self.val(*a).data();
                    let bv = self.val(*b).data();
                    for i in 0..av.len() {
                        feed(av[i] >= bv[i]);
                    }
                }
                Op::MaxPool { x, size } => {
                    let sx = self.val(*x).shape();
                    let (h2, w2) = (sx[2], sx[3]);
                    let (oh, ow) = (h2 / size, w2 / size);
                    let xv = self.val(*x).data();
                    for img in 0..sx[0] * sx[1] {
                        let src = &xv[img * h2 * w2..(img + 1) * h2 * w2];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut arg = 0usize;
                                let mut best = src[oy * size * w2 + ox * size];
                                for ky in 0..*size {
                                    for kx in 0..*size {
                                        let v = src[(oy * size + ky) * w2 + ox * size + kx];
                                        if v > best {
                                            best = v;
                                            arg = ky * size + kx;
                                        }
                                    }
                                }
                                feed(arg & 1 != 0);
                                feed(arg & 2 != 0);
                                feed(arg & 4 != 0);
                                let _ = (oh, ow);
                            }
                        }
                    }
                }
                Op::Ln { x } => {
                    for &v in self.val(*x).data() {
                        feed(v < E::LN_FLOOR);
                    }
                }
                Op::Exp { x } => {
                    for &v in self.val(*x).data() {
                        feed(v > E::EXP_SATURATION);
                    }
                }
                _ => {}
            }
        }
        h
    }
}

// ---- kernels --------------------------------------------------------------

fn zip_map<E: Elem>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<E: Elem>(acc: &mut [E], src: &[E], scale: E) {
    for i in 0..acc.len() {
        acc[i] += src[i] * scale;
    }
}

/// Run `f` over each `width`-sized row of `buf`, in parallel when the total
/// work is large. Each row is written by exactly one invocation, so the
/// result is identical either way.
fn run_rows<E: Elem>(buf: &mut [E], width: usize, work: usize, f: impl Fn(usize, &mut [E]) + Sync) {
    if work >= PAR_THRESHOLD && buf.len() > width {
        buf.par_chunks_mut(width)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    } else {
        for (r, row) in buf.chunks_mut(width).enumerate() {
            f(r, row);
        }
    }
}

pub(crate) fn matmul_into<E: Elem>(a: &[E], b: &[E], out: &mut [E], n: usize, k: usize, m: usize) {
    run_rows(out, m, n * k * m, |r, row| {
        let ar = &a[r * k..(r + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av != E::ZERO {
                let br = &b[kk * m..(kk + 1) * m];
                for j in 0..m {
                    row[j] += av * br[j];
                }
            }
        }
    });
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
}

fn conv2d_forward<E: Elem>(x: &[E], w: &[E], b: &[E], out: &mut [E], d: ConvDims) {
    let (oh, ow) = (d.h - d.kh + 1, d.w - d.kw + 1);
    let per_img = d.f * oh * ow;
    run_rows(out, per_img, d.n * per_img * d.c * d.kh * d.kw, |img, dst| {
        let xi = &x[img * d.c * d.h * d.w..(img + 1) * d.c * d.h * d.w];
        for f in 0..d.f {
            let dst_f = &mut dst[f * oh * ow..(f + 1) * oh * ow];
            for v in dst_f.iter_mut() {
                *v = b[f];
            }
            for c in 0..d.c {
                let xc = &xi[c * d.h * d.w..(c + 1) * d.h * d.w];
                let wf = &w[(f * d.c + c) * d.kh * d.kw..(f * d.c + c + 1) * d.kh * d.kw];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wf[ky * d.kw + kx];
                        if wv == E::ZERO {
                            continue;
                        }
                        for oy in 0..oh {
                            let src = &xc[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + ow];
                            let dst_row = &mut dst_f[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                dst_row[ox] += wv * src[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_input<E: Elem>(gx: &mut [E], dy: &[E], w: &[E], d: ConvDims) {
    let (oh, ow) = (d.h - d.kh + 1, d.w - d.kw + 1);
    let per_img = d.c * d.h * d.w;
    run_rows(gx, per_img, d.n * per_img * d.f, |img, gxi| {
        let dyi = &dy[img * d.f * oh * ow..(img + 1) * d.f * oh * ow];
        for f in 0..d.f {
            let dyf = &dyi[f * oh * ow..(f + 1) * oh * ow];
            for c in 0..d.c {
                let gxc = &mut gxi[c * d.h * d.w..(c + 1) * d.h * d.w];
                let wf = &w[(f * d.c + c) * d.kh * d.kw..(f * d.c + c + 1) * d.kh * d.kw];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wf[ky * d.kw + kx];
                        if wv == E::ZERO {
                            continue;
                        }
                        for oy in 0..oh {
                            let dyr = &dyf[oy * ow..(oy + 1) * ow];
                            let gxr = &mut gxc[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + ow];
                            for ox in 0..ow {
                                gxr[ox] += wv * dyr[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_weight<E: Elem>(gw: &mut [E], dy: &[E], x: &[E], d: ConvDims) {
    let (oh, ow) = (d.h - d.kh + 1, d.w - d.kw + 1);
    let per_f = d.c * d.kh * d.kw;
    // parallel over filters; batch loop inside stays in fixed order
    run_rows(gw, per_f, d.f * per_f * d.n * oh * ow / d.kh.max(1), |f, gwf| {
        for img in 0..d.n {
            let dyf = &dy[(img * d.f + f) * oh * ow..(img * d.f + f + 1) * oh * ow];
            let xi = &x[img * d.c * d.h * d.w..(img + 1) * d.c * d.h * d.w];
            for c in 0..d.c {
                let xc = &xi[c * d.h * d.w..(c + 1) * d.h * d.w];
                let gwc = &mut gwf[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut s = E::ZERO;
                        for oy in 0..oh {
                            let dyr = &dyf[oy * ow..(oy + 1) * ow];
                            let xr = &xc[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + ow];
                            for ox in 0..ow {
                                s += dyr[ox] * xr[ox];
                            }
                        }
                        gwc[ky * d.kw + kx] += s;
                    }
                }
            }
        }
    });
}

pub(crate) fn log_softmax_row<E: Elem>(row: &[E], out: &mut [E]) {
    let mut m = row[0];
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut s = E::ZERO;
    for &v in row {
        s += (v - m).exp();
    }
    let ln_s = s.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m) - ln_s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
