//! Network definitions: explainer, approximator and black-box models, built
//! from declarative layer specs over the diffcore op set.
//!
//! The black box is an interface, not a model: training only ever observes
//! `predict` outputs, so any deterministic classifier can sit behind it.

use serde::{Deserialize, Serialize};

use crate::chunker::ChunkMap;
use crate::diffcore::{Elem, Graph, NodeId, Tensor, TensorOf};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One layer of a feed-forward architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize },
    Dense { units: usize },
    Relu,
    MaxPool { size: usize },
    MeanOverAxis { axis: usize },
    LogSoftmax,
    Flatten,
}

/// Per-instance input shape plus the layer stack. Shape compatibility is
/// validated at build time; mismatches never reach compute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// A named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A built model: layer specs plus initialized parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchSpec,
    params: Vec<Param>,
    output_shape: Vec<usize>,
}

/// Graph-bound parameter leaves for one forward construction.
pub struct Binding {
    param_ids: Vec<NodeId>,
}

impl Binding {
    /// Leaf ids in parameter order.
    pub fn ids(&self) -> &[NodeId] {
        &self.param_ids
    }
}

impl Model {
    /// Build a model with fan-in-scaled uniform weight init (bound
    /// `sqrt(6 / fan_in)`) and zero biases, drawn from `rng`.
    pub fn new(spec: ArchSpec, rng: &mut RngStream) -> Result<Self> {
        let mut params = Vec::new();
        let mut shape = spec.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model input shape {:?} invalid",
                shape
            )));
        }
        for (li, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d { filters, kernel } => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {li}: conv2d needs [C,H,W] input, has {:?}",
                            shape
                        )));
                    }
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    if filters == 0 || kernel == 0 || kernel > h || kernel > w {
                        return Err(Error::InvalidArgument(format!(
                            "layer {li}: conv2d {filters}x{kernel} incompatible with {:?}",
                            shape
                        )));
                    }
                    let fan_in = c * kernel * kernel;
                    params.push(Param {
                        name: format!("l{li}.conv.w"),
                        value: uniform_init(vec![filters, c, kernel, kernel], fan_in, rng),
                    });
                    params.push(Param {
                        name: format!("l{li}.conv.b"),
                        value: Tensor::zeros(vec![filters]),
                    });
                    shape = vec![filters, h - kernel + 1, w - kernel + 1];
                }
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {li}: dense needs flat input, has {:?} (missing flatten?)",
                            shape
                        )));
                    }
                    let fan_in = shape[0];
                    params.push(Param {
                        name: format!("l{li}.dense.w"),
                        value: uniform_init(vec![fan_in, units], fan_in, rng),
                    });
                    params.push(Param {
                        name: format!("l{li}.dense.b"),
                        value: Tensor::zeros(vec![units]),
                    });
                    shape = vec![units];
                }
                LayerSpec::Relu | LayerSpec::LogSoftmax => {}
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {li}: max-pool needs [C,H,W] input, has {:?}",
                            shape
                        )));
                    }
                    if size == 0 || !shape[1].is_multiple_of(size) || !shape[2].is_multiple_of(size) {
                        return Err(Error::InvalidArgument(format!(
                            "layer {li}: pool {size} does not divide {:?}",
                            shape
                        )));
                    }
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                }
                LayerSpec::MeanOverAxis { axis } => {
                    if axis >= shape.len() {
                        return Err(Error::InvalidArgument(format!(
                            "layer {li}: mean axis {axis} out of range for {:?}",
                            shape
                        )));
                    }
                    shape.remove(axis);
                    if shape.is_empty() {
                        shape = vec![1];
                    }
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                }
            }
        }
        Ok(Model {
            spec,
            params,
            output_shape: shape,
        })
    }

    /// Rebuild a model from a spec plus previously saved parameters
    /// (checkpoint load path). Names and shapes must match the spec exactly.
    pub fn from_params(spec: ArchSpec, saved: Vec<Param>) -> Result<Self> {
        let mut rng = RngStream::from_seed(0);
        let mut model = Model::new(spec, &mut rng)?;
        if saved.len() != model.params.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: checkpoint has {}, architecture wants {}",
                saved.len(),
                model.params.len()
            )));
        }
        for (slot, s) in model.params.iter_mut().zip(saved) {
            if slot.name != s.name {
                return Err(Error::Data(format!(
                    "parameter name mismatch: {} vs {}",
                    slot.name, s.name
                )));
            }
            if slot.value.shape() != s.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    s.name,
                    slot.value.shape(),
                    s.value.shape()
                )));
            }
            slot.value = s.value;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_features(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    /// Insert this model's parameters as graph leaves.
    pub fn bind<E: Elem>(&self, g: &mut Graph<E>, trainable: bool) -> Binding {
        let param_ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.cast::<E>(), trainable))
            .collect();
        Binding { param_ids }
    }

    /// Forward through bound parameters. `x` is `[N, features]` (flat rows)
    /// or `[N, ...input_shape]`.
    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let xs = g.value(x)?.shape().to_vec();
        let features = self.input_features();
        if xs.is_empty() || xs[1..].iter().product::<usize>() != features {
            return Err(Error::InvalidArgument(format!(
                "forward: input shape {:?} incompatible with model input {:?}",
                xs, self.spec.input_shape
            )));
        }
        let n = xs[0];
        let mut shape = self.spec.input_shape.clone();
        let mut cur = {
            let mut with_batch = vec![n];
            with_batch.extend_from_slice(&shape);
            g.reshape(x, with_batch)?
        };
        let mut pi = 0usize;
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Conv2d { filters, kernel } => {
                    let w = bind.param_ids[pi];
                    let b = bind.param_ids[pi + 1];
                    pi += 2;
                    cur = g.conv2d(cur, w, b)?;
                    shape = vec![filters, shape[1] - kernel + 1, shape[2] - kernel + 1];
                }
                LayerSpec::Dense { units } => {
                    let w = bind.param_ids[pi];
                    let b = bind.param_ids[pi + 1];
                    pi += 2;
                    let mm = g.matmul(cur, w)?;
                    cur = g.add_bias(mm, b)?;
                    shape = vec![units];
                }
                LayerSpec::Relu => {
                    cur = g.relu(cur)?;
                }
                LayerSpec::MaxPool { size } => {
                    cur = g.max_pool(cur, size)?;
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                }
                LayerSpec::MeanOverAxis { axis } => {
                    cur = g.mean_axis(cur, axis + 1)?;
                    shape.remove(axis);
                    if shape.is_empty() {
                        shape = vec![1];
                        let mut with_batch = vec![n];
                        with_batch.extend_from_slice(&shape);
                        cur = g.reshape(cur, with_batch)?;
                    }
                }
                LayerSpec::LogSoftmax => {
                    cur = g.log_softmax(cur)?;
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    cur = g.reshape(cur, vec![n, shape[0]])?;
                }
            }
        }
        Ok(cur)
    }

    /// Inference convenience: forward a batch of flat rows without
    /// gradients, returning the output values.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g: Graph<f32> = Graph::new();
        let bind = self.bind(&mut g, false);
        let xs = x.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "predict: expected [N, features], got {:?}",
                xs
            )));
        }
        let xid = g.leaf(x.clone(), false);
        let out = self.forward(&mut g, &bind, xid)?;
        Ok(g.value(out)?.clone())
    }
}

fn uniform_init(shape: Vec<usize>, fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform_range(-bound, bound) as f32)
        .collect();
    TensorOf::new(shape, data).expect("init shape consistent")
}

// ---- black boxes ------------------------------------------------------------

/// The opaque decision system under explanation. Only predictions are
/// observable; outputs are valid log-probability rows, deterministic per
/// input.
pub trait BlackBox: Send + Sync {
    fn class_count(&self) -> usize;
    fn input_features(&self) -> usize;
    /// `x: [N, features]` -> `[N, classes]` log-probabilities.
    fn predict_log_probs(&self, x: &Tensor) -> Result<Tensor>;
}

/// Hard labels (argmax of the black-box output) for a batch.
pub fn predict_labels(bb: &dyn BlackBox, x: &Tensor) -> Result<Vec<usize>> {
    let lp = bb.predict_log_probs(x)?;
    let c = bb.class_count();
    Ok(lp
        .data()
        .chunks_exact(c)
        .map(argmax)
        .collect())
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A trained model serving as the black box.
pub struct ModelBlackBox {
    model: Model,
    classes: usize,
}

impl ModelBlackBox {
    pub fn new(model: Model) -> Result<Self> {
        let classes = *model.output_shape().last().ok_or_else(|| {
            Error::InvalidArgument("black-box model has no output axis".into())
        })?;
        if model.output_shape().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "black-box model output shape {:?} is not a class vector",
                model.output_shape()
            )));
        }
        Ok(ModelBlackBox { model, classes })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl BlackBox for ModelBlackBox {
    fn class_count(&self) -> usize {
        self.classes
    }
    fn input_features(&self) -> usize {
        self.model.input_features()
    }
    fn predict_log_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.model.predict(x)
    }
}

/// Planted-rule oracle over chunks: the binary label depends only on the
/// designated relevant chunks (class 1 iff the sum of their feature means is
/// strictly positive; the all-zero input therefore maps to class 0).
pub struct RuleBlackBox {
    map: ChunkMap,
    relevant: Vec<usize>,
    margin: f32,
}

impl RuleBlackBox {
    pub fn new(map: ChunkMap, relevant: Vec<usize>) -> Result<Self> {
        if relevant.is_empty() {
            return Err(Error::InvalidArgument("rule black box: empty relevant set".into()));
        }
        if let Some(&bad) = relevant.iter().find(|&&j| j >= map.d()) {
            return Err(Error::InvalidArgument(format!(
                "rule black box: chunk {bad} out of range for d = {}",
                map.d()
            )));
        }
        Ok(RuleBlackBox {
            map,
            relevant,
            margin: 8.0,
        })
    }

    pub fn relevant_chunks(&self) -> &[usize] {
        &self.relevant
    }

    fn score(&self, row: &[f32]) -> f32 {
        let mut s = 0.0f32;
        for &j in &self.relevant {
            let members = self.map.members(j);
            let mut m = 0.0f32;
            for &i in members {
                m += row[i];
            }
            s += m / members.len() as f32;
        }
        s
    }
}

impl BlackBox for RuleBlackBox {
    fn class_count(&self) -> usize {
        2
    }
    fn input_features(&self) -> usize {
        self.map.feature_count()
    }
    fn predict_log_probs(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.map.feature_count();
        if x.shape().len() != 2 || x.shape()[1] != f {
            return Err(Error::InvalidArgument(format!(
                "rule black box: expected [N, {f}], got {:?}",
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n * 2);
        for r in 0..n {
            let row = &x.data()[r * f..(r + 1) * f];
            let logit1 = if self.score(row) > 0.0 { self.margin } else { -self.margin };
            let mut lp = [0.0f32; 2];
            crate::diffcore::log_softmax_slice(&[0.0, logit1], &mut lp);
            out.extend_from_slice(&lp);
        }
        Tensor::new(vec![n, 2], out)
    }
}

// ---- built-in architectures --------------------------------------------------

/// The digit-recognition black box: two 5x5 conv layers (10 and 20 filters)
/// each followed by 2x2 max-pooling, then 50- and 10-unit dense layers and a
/// log-softmax head.
pub fn mnist_blackbox_arch() -> ArchSpec {
    ArchSpec {
        input_shape: vec![1, 28, 28],
        layers: vec![
            LayerSpec::Conv2d { filters: 10, kernel: 5 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { filters: 20, kernel: 5 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 50 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 10 },
            LayerSpec::LogSoftmax,
        ],
    }
}

/// Build the trainable digit-recognition black box.
pub fn build_blackbox_mnist(rng: &mut RngStream) -> Result<Model> {
    Model::new(mnist_blackbox_arch(), rng)
}

/// Explainer for grid chunks on 28x28 images: two 5x5 conv blocks (8 and
/// 16 filters, ReLU, 2x2 pool) and a dense head over the `d` chunk logits.
/// Valid convolutions shrink the feature map below the chunk grid, so the
/// 1x1-conv head is replaced by a dense head of the same output size; other
/// chunk counts reuse the same trunk with a resized head.
pub fn mnist_explainer_arch(d: usize) -> ArchSpec {
    ArchSpec {
        input_shape: vec![1, 28, 28],
        layers: vec![
            LayerSpec::Conv2d { filters: 8, kernel: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv2d { filters: 16, kernel: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: d },
            LayerSpec::LogSoftmax,
        ],
    }
}

/// Approximator for masked 28x28 inputs: two 5x5 conv blocks (32 and 64
/// filters, ReLU, 2x2 pool) and a 10-way dense log-softmax head.
pub fn mnist_approximator_arch() -> ArchSpec {
    ArchSpec {
        input_shape: vec![1, 28, 28],
        layers: vec![
            LayerSpec::Conv2d { filters: 32, kernel: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv2d { filters: 64, kernel: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::LogSoftmax,
        ],
    }
}

/// Dense explainer over flat token features, emitting `d` chunk log-probs.
pub fn dense_explainer_arch(features: usize, hidden: usize, d: usize) -> ArchSpec {
    ArchSpec {
        input_shape: vec![features],
        layers: vec![
            LayerSpec::Dense { units: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { units: d },
            LayerSpec::LogSoftmax,
        ],
    }
}

/// Dense approximator over flat token features.
pub fn dense_approximator_arch(features: usize, hidden: usize, classes: usize) -> ArchSpec {
    ArchSpec {
        input_shape: vec![features],
        layers: vec![
            LayerSpec::Dense { units: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
            LayerSpec::LogSoftmax,
        ],
    }
}

/// Explainer forward for a batch of flat rows: returns `[N, d]` chunk
/// log-probabilities (the model head must already be log-softmax).
pub fn explainer_forward<E: Elem>(
    model: &Model,
    g: &mut Graph<E>,
    bind: &Binding,
    x: NodeId,
    d: usize,
) -> Result<NodeId> {
    if model.output_shape() != [d] {
        return Err(Error::InvalidArgument(format!(
            "explainer head emits {:?}, chunk map has d = {d}",
            model.output_shape()
        )));
    }
    model.forward(g, bind, x)
}

/// Approximator forward for masked inputs: returns `[N, classes]`
/// log-probabilities.
pub fn approximator_forward<E: Elem>(
    model: &Model,
    g: &mut Graph<E>,
    bind: &Binding,
    t: NodeId,
) -> Result<NodeId> {
    model.forward(g, bind, t)
}
