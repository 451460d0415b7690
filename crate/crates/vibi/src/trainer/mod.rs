//! Joint optimization of explainer and approximator, grid search and
//! checkpoint persistence.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;

use serde::{Deserialize, Serialize};

use crate::chunker::ChunkSpec;
use crate::data::{DataSplits, Dataset};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::{ArchSpec, BlackBox, Model};
use crate::objective::{build_loss_graph, LossTerms};
use crate::rng::{tags, RngStream};
use crate::sampler;

/// Full hyperparameter and architecture description of one training run.
/// Serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VibiConfig {
    /// Chunks selected per instance.
    pub k: usize,
    /// Gumbel-softmax temperature.
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    /// Compressiveness trade-off weight.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Mask draws per instance per training step (the sample count L).
    #[serde(default = "defaults::train_samples")]
    pub train_samples: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub chunks: ChunkSpec,
    pub explainer: ArchSpec,
    pub approximator: ArchSpec,
    /// Mask draws per instance when evaluating approximator fidelity.
    #[serde(default = "defaults::eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "defaults::adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Stop after this many epochs without validation-fidelity improvement.
    #[serde(default = "defaults::early_stop_patience")]
    pub early_stop_patience: Option<usize>,
    /// Cap on validation instances scored per epoch for early stopping.
    #[serde(default = "defaults::val_limit")]
    pub val_limit: usize,
    /// Train against the black box's probability vectors instead of its
    /// hard labels (distillation mode).
    #[serde(default)]
    pub soft_labels: bool,
}

mod defaults {
    pub fn tau() -> f64 {
        0.7
    }
    pub fn beta() -> f64 {
        0.01
    }
    pub fn train_samples() -> usize {
        4
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn batch() -> usize {
        100
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn eval_samples() -> usize {
        12
    }
    pub fn adam_beta1() -> f64 {
        0.5
    }
    pub fn adam_beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn early_stop_patience() -> Option<usize> {
        Some(5)
    }
    pub fn val_limit() -> usize {
        1000
    }
}

impl VibiConfig {
    pub fn validate(&self) -> Result<()> {
        let map = self.chunks.build()?;
        if self.k == 0 || self.k > map.d() {
            return Err(Error::InvalidArgument(format!(
                "k = {} outside 1..={}",
                self.k,
                map.d()
            )));
        }
        if self.tau.is_nan() || self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau = {} must be finite and > 0",
                self.tau
            )));
        }
        if self.beta.is_nan() || self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta = {} must be finite and >= 0",
                self.beta
            )));
        }
        if self.batch == 0 || self.epochs == 0 || self.train_samples == 0 || self.eval_samples == 0
        {
            return Err(Error::InvalidArgument(
                "batch, epochs, train_samples and eval_samples must be >= 1".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lr = {} must be finite and > 0",
                self.lr
            )));
        }
        let expl_features: usize = self.explainer.input_shape.iter().product();
        let appr_features: usize = self.approximator.input_shape.iter().product();
        if expl_features != map.feature_count() || appr_features != map.feature_count() {
            return Err(Error::InvalidArgument(format!(
                "explainer/approximator input sizes {expl_features}/{appr_features} \
                 do not match the {}-feature chunk map",
                map.feature_count()
            )));
        }
        Ok(())
    }
}

/// Which objective the trainer optimizes. `CrossEntropyOnly` never builds
/// the KL term into the loss graph; it is the beta = 0 special case taken
/// by an independent code path (the KL value is still evaluated forward-only
/// for the trace).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Vibi,
    CrossEntropyOnly,
}

/// Outcome of one training run.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    /// Epoch at which early stopping restored the best parameters, if any.
    pub stopped_at: Option<usize>,
    /// Validation approximator fidelity of the returned parameters, when a
    /// validation split was scored.
    pub val_fidelity: Option<f64>,
}

/// Train the explainer/approximator pair against a black box.
///
/// Per batch: explainer forward, `train_samples` relaxed top-k mask draws,
/// masked approximator forwards, loss assembly, one backward pass, and one
/// Adam step over the union of both parameter sets. Black-box labels are
/// queried through `predict` only, once, before the loop. Deterministic
/// given `(config, data, black box)`.
pub fn train_vibi(
    splits: &DataSplits,
    blackbox: &dyn BlackBox,
    config: &VibiConfig,
    mode: LossMode,
) -> Result<TrainOutput> {
    config.validate()?;
    if mode == LossMode::CrossEntropyOnly && config.beta != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cross-entropy-only mode requires beta = 0, got {}",
            config.beta
        )));
    }
    let map = config.chunks.build()?;
    let train = &splits.train;
    if train.features() != map.feature_count() {
        return Err(Error::InvalidArgument(format!(
            "training data has {} features, chunk map expects {}",
            train.features(),
            map.feature_count()
        )));
    }
    if blackbox.input_features() != map.feature_count() {
        return Err(Error::InvalidArgument(format!(
            "black box expects {} features, chunk map has {}",
            blackbox.input_features(),
            map.feature_count()
        )));
    }

    let root = RngStream::from_seed(config.seed);
    let mut explainer = Model::new(config.explainer.clone(), &mut root.child_path(&[tags::INIT, 0]))?;
    let mut approximator =
        Model::new(config.approximator.clone(), &mut root.child_path(&[tags::INIT, 1]))?;
    let classes = blackbox.class_count();
    if explainer.output_shape() != [map.d()] {
        return Err(Error::InvalidArgument(format!(
            "explainer emits {:?}, expected [{}]",
            explainer.output_shape(),
            map.d()
        )));
    }
    if approximator.output_shape() != [classes] {
        return Err(Error::InvalidArgument(format!(
            "approximator emits {:?}, black box has {classes} classes",
            approximator.output_shape()
        )));
    }

    // Black-box labels for the whole training set, queried up front.
    let labels = crate::eval::blackbox_labels(blackbox, train)?;
    let soft_targets: Option<Tensor> = if config.soft_labels {
        Some(crate::eval::blackbox_probs(blackbox, train)?)
    } else {
        None
    };

    let n = train.n();
    let mut trace: Vec<LossTerms> = Vec::new();
    let mut adam = {
        let all: Vec<&crate::nets::Param> =
            explainer.params().iter().chain(approximator.params().iter()).collect();
        AdamState::new(&all, config.adam_beta1, config.adam_beta2, config.adam_eps)
    };

    let mut best: Option<(f64, Vec<crate::nets::Param>, Vec<crate::nets::Param>, usize)> = None;
    let mut bad_epochs = 0usize;
    let mut stopped_at = None;
    let mut last_fid = None;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.child_path(&[tags::SHUFFLE, epoch as u64]).shuffle(&mut order);

        for (bi, batch_idx) in order.chunks(config.batch).enumerate() {
            let terms = train_batch(
                &map,
                &mut explainer,
                &mut approximator,
                &mut adam,
                train,
                &labels,
                soft_targets.as_ref(),
                batch_idx,
                config,
                mode,
                &root,
                epoch as u64,
                bi as u64,
            )?;
            if !terms.is_finite() {
                let last = trace.last().copied();
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} batch {bi} \
                     (nll {}, kl {}); last finite loss: {:?}",
                    terms.nll, terms.kl, last
                )));
            }
            trace.push(terms);
        }

        if let Some(patience) = config.early_stop_patience {
            if splits.val.n() > 0 {
                let val = splits.val.head(config.val_limit);
                let fid = crate::eval::approximator_fidelity_models(
                    &explainer,
                    &approximator,
                    &map,
                    config.k,
                    config.tau,
                    config.eval_samples,
                    blackbox,
                    &val,
                    &root.child_path(&[tags::EVAL, epoch as u64]),
                )?
                .accuracy;
                last_fid = Some(fid);
                let improved = best.as_ref().is_none_or(|(b, ..)| fid > *b);
                if improved {
                    best = Some((
                        fid,
                        explainer.params().to_vec(),
                        approximator.params().to_vec(),
                        epoch,
                    ));
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    if bad_epochs >= patience {
                        stopped_at = Some(epoch);
                        break 'epochs;
                    }
                }
            }
        }
    }

    if let Some((fid, e_params, a_params, _)) = best {
        for (slot, saved) in explainer.params_mut().iter_mut().zip(e_params) {
            slot.value = saved.value;
        }
        for (slot, saved) in approximator.params_mut().iter_mut().zip(a_params) {
            slot.value = saved.value;
        }
        last_fid = Some(fid);
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: config.clone(),
            explainer: explainer.params().to_vec(),
            approximator: approximator.params().to_vec(),
            loss_trace: trace,
        },
        stopped_at,
        val_fidelity: last_fid,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    map: &crate::chunker::ChunkMap,
    explainer: &mut Model,
    approximator: &mut Model,
    adam: &mut AdamState,
    train: &Dataset,
    labels: &[usize],
    soft_targets: Option<&Tensor>,
    batch_idx: &[usize],
    config: &VibiConfig,
    mode: LossMode,
    root: &RngStream,
    epoch: u64,
    batch_no: u64,
) -> Result<LossTerms> {
    let b = batch_idx.len();
    let d = map.d();
    let x_batch = train.gather_rows(batch_idx);
    let targets: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();

    let mut g: Graph<f32> = Graph::new();
    let xb = g.leaf(x_batch, false);
    let eb = explainer.bind(&mut g, true);
    let elp = explainer.forward(&mut g, &eb, xb)?;
    let ab = approximator.bind(&mut g, true);

    let mut alps = Vec::with_capacity(config.train_samples);
    for l in 0..config.train_samples {
        let mut noise_ids = Vec::with_capacity(config.k);
        for m in 0..config.k {
            let mut nrng =
                root.child_path(&[tags::MASK_NOISE, epoch, batch_no, l as u64, m as u64]);
            noise_ids.push(sampler::noise_leaf(&mut g, &mut nrng, b, d));
        }
        let z = sampler::relaxed_topk_graph(&mut g, elp, &noise_ids, config.tau)?;
        let t = map.apply_mask_graph(&mut g, xb, z)?;
        alps.push(approximator.forward(&mut g, &ab, t)?);
    }

    let (loss, nll_node, kl_node) = match (mode, soft_targets) {
        (LossMode::Vibi, None) => {
            let nodes = build_loss_graph(&mut g, &alps, &targets, elp, Some(config.beta))?;
            (nodes.total, nodes.nll, nodes.kl)
        }
        (LossMode::CrossEntropyOnly, None) => {
            let nodes = build_loss_graph(&mut g, &alps, &targets, elp, None)?;
            // forward-only KL for the trace; not connected to the loss
            let diag = diagnostic_kl(&mut g, elp, d)?;
            (nodes.total, nodes.nll, Some(diag))
        }
        (_, Some(soft)) => {
            let rows: Vec<f32> = batch_idx
                .iter()
                .flat_map(|&i| {
                    let c = soft.shape()[1];
                    soft.data()[i * c..(i + 1) * c].to_vec()
                })
                .collect();
            let classes = soft.shape()[1];
            let p_leaf = g.leaf(Tensor::new(vec![b, classes], rows)?, false);
            let nll = soft_nll(&mut g, &alps, p_leaf)?;
            match mode {
                LossMode::Vibi => {
                    let kl = kl_branch(&mut g, elp, d)?;
                    let weighted = g.mul_scalar(kl, config.beta as f32)?;
                    let total = g.add(nll, weighted)?;
                    (total, nll, Some(kl))
                }
                LossMode::CrossEntropyOnly => {
                    let diag = diagnostic_kl(&mut g, elp, d)?;
                    (nll, nll, Some(diag))
                }
            }
        }
    };

    let terms = LossTerms {
        nll: g.value(nll_node)?.item()?,
        kl: match kl_node {
            Some(id) => g.value(id)?.item()?,
            None => 0.0,
        },
        beta: config.beta as f32,
        total: g.value(loss)?.item()?,
    };
    if !terms.is_finite() {
        return Ok(terms); // caller reports divergence with context
    }

    g.backward(loss)?;
    let grads: Vec<Option<Tensor>> = eb
        .ids()
        .iter()
        .chain(ab.ids())
        .map(|&id| Ok(g.grad(id)?.cloned()))
        .collect::<Result<_>>()?;
    let mut all: Vec<&mut crate::nets::Param> = explainer
        .params_mut()
        .iter_mut()
        .chain(approximator.params_mut().iter_mut())
        .collect();
    adam_step(&mut all, &grads, adam, config.lr)?;
    Ok(terms)
}

/// Mean KL-to-uniform over batch rows, built from the explainer's
/// log-probability output.
fn kl_branch(
    g: &mut Graph<f32>,
    explainer_log_probs: crate::diffcore::NodeId,
    d: usize,
) -> Result<crate::diffcore::NodeId> {
    let p = g.exp(explainer_log_probs)?;
    let shifted = g.add_scalar(explainer_log_probs, (d as f32).ln())?;
    let terms = g.mul(p, shifted)?;
    let row_mean = g.mean_axis(terms, 1)?;
    let row_sum = g.mul_scalar(row_mean, d as f32)?;
    g.mean_all(row_sum)
}

fn diagnostic_kl(
    g: &mut Graph<f32>,
    explainer_log_probs: crate::diffcore::NodeId,
    d: usize,
) -> Result<crate::diffcore::NodeId> {
    kl_branch(g, explainer_log_probs, d)
}

/// Soft-label objective: `-mean_row dot(p_bb, log q)` averaged over draws.
fn soft_nll(
    g: &mut Graph<f32>,
    approx_log_probs: &[crate::diffcore::NodeId],
    soft_targets: crate::diffcore::NodeId,
) -> Result<crate::diffcore::NodeId> {
    let classes = g.value(soft_targets)?.shape()[1];
    let l = approx_log_probs.len();
    let mut acc = None;
    for &alp in approx_log_probs {
        let prod = g.mul(soft_targets, alp)?;
        let row_mean = g.mean_axis(prod, 1)?;
        let row_sum = g.mul_scalar(row_mean, classes as f32)?;
        let m = g.mean_all(row_sum)?;
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    let total = acc.expect("at least one draw");
    g.mul_scalar(total, -1.0 / l as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{dense_approximator_arch, dense_explainer_arch};

    fn base() -> VibiConfig {
        VibiConfig {
            k: 2,
            tau: 0.5,
            beta: 0.1,
            train_samples: 4,
            lr: 1e-3,
            batch: 50,
            epochs: 3,
            seed: 0,
            chunks: ChunkSpec::TokenGroup {
                n_tokens: 8,
                group_size: 1,
                features_per_token: 4,
            },
            explainer: dense_explainer_arch(32, 8, 8),
            approximator: dense_approximator_arch(32, 8, 2),
            eval_samples: 12,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: None,
            val_limit: 1000,
            soft_labels: false,
        }
    }

    #[test]
    fn validate_accepts_sane_config() {
        assert!(base().validate().is_ok());
    }

    #[test]
    fn validate_rejects_bad_hyperparameters() {
        for mutate in [
            (|c: &mut VibiConfig| c.k = 0) as fn(&mut VibiConfig),
            |c| c.k = 9,
            |c| c.tau = 0.0,
            |c| c.tau = f64::NAN,
            |c| c.tau = f64::INFINITY,
            |c| c.beta = -0.1,
            |c| c.beta = f64::NAN,
            |c| c.lr = 0.0,
            |c| c.lr = f64::NAN,
            |c| c.batch = 0,
            |c| c.epochs = 0,
            |c| c.train_samples = 0,
        ] {
            let mut c = base();
            mutate(&mut c);
            assert!(c.validate().is_err());
        }
    }
}

// ---- grid search -------------------------------------------------------------

/// Hyperparameter lists swept by [`grid_search`], iterated in the field
/// order below (tau outermost, k innermost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpace {
    pub taus: Vec<f64>,
    pub lrs: Vec<f64>,
    pub betas: Vec<f64>,
    pub ks: Vec<usize>,
}

/// One evaluated grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub tau: f64,
    pub lr: f64,
    pub beta: f64,
    pub k: usize,
    /// Validation approximator fidelity; absent if the cell failed.
    pub fidelity: Option<f64>,
    pub error: Option<String>,
}

pub struct GridResult {
    pub best: Option<VibiConfig>,
    pub table: Vec<GridCell>,
}

/// Train every cell of the grid, score validation approximator fidelity,
/// and return the argmax cell (ties resolved to the first in iteration
/// order). A failing cell is recorded and skipped without aborting the
/// sweep.
pub fn grid_search(
    splits: &DataSplits,
    blackbox: &dyn BlackBox,
    base: &VibiConfig,
    space: &GridSpace,
) -> Result<GridResult> {
    if space.taus.is_empty() || space.lrs.is_empty() || space.betas.is_empty() || space.ks.is_empty()
    {
        return Err(Error::InvalidArgument("grid search over an empty space".into()));
    }
    let mut table = Vec::new();
    let mut best: Option<(f64, VibiConfig)> = None;
    for &tau in &space.taus {
        for &lr in &space.lrs {
            for &beta in &space.betas {
                for &k in &space.ks {
                    let mut cfg = base.clone();
                    cfg.tau = tau;
                    cfg.lr = lr;
                    cfg.beta = beta;
                    cfg.k = k;
                    let mut cell = GridCell {
                        tau,
                        lr,
                        beta,
                        k,
                        fidelity: None,
                        error: None,
                    };
                    match run_cell(splits, blackbox, &cfg) {
                        Ok(fid) => {
                            cell.fidelity = Some(fid);
                            if best.as_ref().is_none_or(|(b, _)| fid > *b) {
                                best = Some((fid, cfg));
                            }
                        }
                        Err(e) => cell.error = Some(e.to_string()),
                    }
                    table.push(cell);
                }
            }
        }
    }
    Ok(GridResult {
        best: best.map(|(_, c)| c),
        table,
    })
}

fn run_cell(splits: &DataSplits, blackbox: &dyn BlackBox, cfg: &VibiConfig) -> Result<f64> {
    let out = train_vibi(splits, blackbox, cfg, LossMode::Vibi)?;
    match out.val_fidelity {
        Some(f) => Ok(f),
        None => {
            let map = cfg.chunks.build()?;
            let r = crate::eval::approximator_fidelity_models(
                &out.checkpoint.explainer_model()?,
                &out.checkpoint.approximator_model()?,
                &map,
                cfg.k,
                cfg.tau,
                cfg.eval_samples,
                blackbox,
                &splits.val,
                &RngStream::from_seed(cfg.seed).child(tags::EVAL),
            )?;
            Ok(r.accuracy)
        }
    }
}
