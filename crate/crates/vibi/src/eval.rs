//! Fidelity metrics: how faithfully the approximator reproduces the black
//! box, through relaxed masks (approximator fidelity) and through the exact
//! hard top-k masks (rationale fidelity). Plus ground-truth selection
//! metrics for planted synthetic tasks.

use serde::Serialize;

use crate::chunker::ChunkMap;
use crate::data::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{argmax, BlackBox, Model};
use crate::rng::{tags, RngStream};
use crate::sampler::{hard_topk, relaxed_topk};
use crate::trainer::Checkpoint;

/// Rows processed per inference batch.
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityVariant {
    Approximator,
    Rationale,
}

/// Agreement between approximator predictions and black-box labels.
/// `confusion[true][pred]` counts instances; `accuracy` is the diagonal
/// fraction; `f1_macro` the unweighted mean of per-class F1.
#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub variant: FidelityVariant,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub n: usize,
    pub samples_per_instance: usize,
    pub confusion: Vec<Vec<usize>>,
}

impl FidelityReport {
    fn from_confusion(
        variant: FidelityVariant,
        confusion: Vec<Vec<usize>>,
        samples_per_instance: usize,
    ) -> Self {
        let n: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        let trace: usize = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        FidelityReport {
            variant,
            accuracy: trace as f64 / n as f64,
            f1_macro: macro_f1(&confusion),
            n,
            samples_per_instance,
            confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Unweighted mean of per-class F1 scores computed from a confusion matrix.
/// Classes with an undefined precision or recall contribute 0.
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let c = confusion.len();
    let mut sum = 0.0f64;
    for cls in 0..c {
        let tp = confusion[cls][cls] as f64;
        let pred_total: f64 = (0..c).map(|r| confusion[r][cls] as f64).sum();
        let true_total: f64 = confusion[cls].iter().map(|&v| v as f64).sum();
        let precision = if pred_total > 0.0 { tp / pred_total } else { 0.0 };
        let recall = if true_total > 0.0 { tp / true_total } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / c as f64
}

/// Micro-averaged F1; for single-label classification this equals accuracy.
pub fn micro_f1(confusion: &[Vec<usize>]) -> f64 {
    let n: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let tp: usize = (0..confusion.len()).map(|c| confusion[c][c]).sum();
    tp as f64 / n as f64
}

/// Black-box hard labels over a dataset, queried in bounded batches.
pub fn blackbox_labels(bb: &dyn BlackBox, data: &Dataset) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(data.n());
    let c = bb.class_count();
    for_blocks(data, |block| {
        let lp = bb.predict_log_probs(&block)?;
        labels.extend(lp.data().chunks_exact(c).map(argmax));
        Ok(())
    })?;
    Ok(labels)
}

/// Black-box probability rows (exp of its log-probabilities).
pub fn blackbox_probs(bb: &dyn BlackBox, data: &Dataset) -> Result<Tensor> {
    let c = bb.class_count();
    let mut out = Vec::with_capacity(data.n() * c);
    for_blocks(data, |block| {
        let lp = bb.predict_log_probs(&block)?;
        out.extend(lp.data().iter().map(|v| v.exp()));
        Ok(())
    })?;
    Tensor::new(vec![data.n(), c], out)
}

fn for_blocks(data: &Dataset, mut f: impl FnMut(Tensor) -> Result<()>) -> Result<()> {
    let n = data.n();
    let feat = data.features();
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let block = Tensor::new(
            vec![end - start, feat],
            data.x().data()[start * feat..end * feat].to_vec(),
        )?;
        f(block)?;
        start = end;
    }
    Ok(())
}

fn explainer_log_probs(explainer: &Model, data: &Dataset) -> Result<Vec<Vec<f32>>> {
    let d = explainer.output_shape()[0];
    let mut rows = Vec::with_capacity(data.n());
    for_blocks(data, |block| {
        let lp = explainer.predict(&block)?;
        rows.extend(lp.data().chunks_exact(d).map(|r| r.to_vec()));
        Ok(())
    })?;
    Ok(rows)
}

/// Approximator fidelity over models: per instance, draw
/// `n_samples` relaxed masks, run the approximator on each masked input,
/// average the probability vectors and take the argmax as the prediction.
/// Instance `i` draws from the child stream `rng_root.child(i)`, so the
/// result is independent of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn approximator_fidelity_models(
    explainer: &Model,
    approximator: &Model,
    map: &ChunkMap,
    k: usize,
    tau: f64,
    n_samples: usize,
    bb: &dyn BlackBox,
    data: &Dataset,
    rng_root: &RngStream,
) -> Result<FidelityReport> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument("fidelity on empty data".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let labels = blackbox_labels(bb, data)?;
    let elp = explainer_log_probs(explainer, data)?;
    let classes = bb.class_count();
    let feat = data.features();
    let mut confusion = vec![vec![0usize; classes]; classes];

    let block_instances = (BLOCK / n_samples).max(1);
    let mut start = 0;
    while start < data.n() {
        let end = (start + block_instances).min(data.n());
        let rows = end - start;
        let mut masked = Vec::with_capacity(rows * n_samples * feat);
        for i in start..end {
            let mut rng = rng_root.child(i as u64);
            let x = data.row(i);
            for _ in 0..n_samples {
                let mask = relaxed_topk(&elp[i], k, tau, &mut rng)?;
                let w = mask.values();
                for (fi, &xv) in x.iter().enumerate() {
                    masked.push(xv * w[map.chunk_of(fi)]);
                }
            }
        }
        let t = Tensor::new(vec![rows * n_samples, feat], masked)?;
        let lp = approximator.predict(&t)?;
        for (ri, i) in (start..end).enumerate() {
            let mut avg = vec![0.0f64; classes];
            for s in 0..n_samples {
                let row = &lp.data()[((ri * n_samples) + s) * classes..][..classes];
                for (c, &v) in row.iter().enumerate() {
                    avg[c] += (v as f64).exp();
                }
            }
            let pred = avg
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(c, _)| c)
                .expect("non-empty classes");
            confusion[labels[i]][pred] += 1;
        }
        start = end;
    }
    Ok(FidelityReport::from_confusion(
        FidelityVariant::Approximator,
        confusion,
        n_samples,
    ))
}

/// Rationale fidelity over models: exact hard top-k mask per instance, one
/// deterministic approximator forward, argmax prediction.
pub fn rationale_fidelity_models(
    explainer: &Model,
    approximator: &Model,
    map: &ChunkMap,
    k: usize,
    bb: &dyn BlackBox,
    data: &Dataset,
) -> Result<FidelityReport> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument("fidelity on empty data".into()));
    }
    let labels = blackbox_labels(bb, data)?;
    let elp = explainer_log_probs(explainer, data)?;
    let classes = bb.class_count();
    let feat = data.features();
    let mut confusion = vec![vec![0usize; classes]; classes];

    let mut start = 0;
    while start < data.n() {
        let end = (start + BLOCK).min(data.n());
        let rows = end - start;
        let mut masked = Vec::with_capacity(rows * feat);
        for i in start..end {
            let mask = hard_topk(&elp[i], k)?;
            let w = mask.values();
            let x = data.row(i);
            for (fi, &xv) in x.iter().enumerate() {
                masked.push(xv * w[map.chunk_of(fi)]);
            }
        }
        let t = Tensor::new(vec![rows, feat], masked)?;
        let lp = approximator.predict(&t)?;
        for (ri, i) in (start..end).enumerate() {
            let pred = argmax(&lp.data()[ri * classes..(ri + 1) * classes]);
            confusion[labels[i]][pred] += 1;
        }
        start = end;
    }
    Ok(FidelityReport::from_confusion(
        FidelityVariant::Rationale,
        confusion,
        1,
    ))
}

/// Approximator fidelity of a checkpoint (masks drawn from streams derived
/// from `seed`).
pub fn approximator_fidelity(
    ck: &Checkpoint,
    bb: &dyn BlackBox,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<FidelityReport> {
    approximator_fidelity_models(
        &ck.explainer_model()?,
        &ck.approximator_model()?,
        &ck.chunk_map()?,
        ck.config.k,
        ck.config.tau,
        n_samples,
        bb,
        data,
        &RngStream::from_seed(seed).child(tags::EVAL),
    )
}

/// Rationale fidelity of a checkpoint (fully deterministic).
pub fn rationale_fidelity(ck: &Checkpoint, bb: &dyn BlackBox, data: &Dataset) -> Result<FidelityReport> {
    rationale_fidelity_models(
        &ck.explainer_model()?,
        &ck.approximator_model()?,
        &ck.chunk_map()?,
        ck.config.k,
        bb,
        data,
    )
}

/// Per-instance precision/recall of hard top-k selections against known
/// relevant chunks (synthetic tasks).
#[derive(Debug, Clone, Serialize)]
pub struct SelectionQuality {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

pub fn selection_quality(
    ck: &Checkpoint,
    data: &Dataset,
    ground_truth: &[Vec<usize>],
) -> Result<SelectionQuality> {
    if ground_truth.len() != data.n() || ground_truth.iter().any(|t| t.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "ground truth missing or empty ({} sets for {} instances)",
            ground_truth.len(),
            data.n()
        )));
    }
    let explainer = ck.explainer_model()?;
    let k = ck.config.k;
    let elp = explainer_log_probs(&explainer, data)?;
    let mut precision = Vec::with_capacity(data.n());
    let mut recall = Vec::with_capacity(data.n());
    for (i, truth) in ground_truth.iter().enumerate() {
        let mask = hard_topk(&elp[i], k)?;
        let hits = mask.selected().iter().filter(|j| truth.contains(j)).count();
        precision.push(hits as f64 / k as f64);
        recall.push(hits as f64 / truth.len() as f64);
    }
    let mean_precision = precision.iter().sum::<f64>() / precision.len() as f64;
    let mean_recall = recall.iter().sum::<f64>() / recall.len() as f64;
    Ok(SelectionQuality {
        precision,
        recall,
        mean_precision,
        mean_recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::make_token_chunks;
    use crate::nets::{dense_approximator_arch, dense_explainer_arch, RuleBlackBox};

    fn tiny_setup() -> (Model, Model, ChunkMap, RuleBlackBox, Dataset) {
        let map = make_token_chunks(4, 1, 2).unwrap();
        let mut rng = RngStream::from_seed(3);
        let explainer = Model::new(dense_explainer_arch(8, 8, 4), &mut rng).unwrap();
        let approximator = Model::new(dense_approximator_arch(8, 8, 2), &mut rng).unwrap();
        let bb = RuleBlackBox::new(map.clone(), vec![1]).unwrap();
        let mut dr = RngStream::from_seed(5);
        let x = Tensor::new(vec![40, 8], (0..320).map(|_| dr.normal() as f32).collect()).unwrap();
        let data = Dataset::new(x, None).unwrap();
        (explainer, approximator, map, bb, data)
    }

    #[test]
    fn constant_class_approximator_confusion_arithmetic() {
        // balanced binary labels, always predicting class 0:
        // accuracy 0.5, macro F1 = (2/3 + 0)/2 = 1/3
        let confusion = vec![vec![50usize, 0], vec![50, 0]];
        let r = FidelityReport::from_confusion(FidelityVariant::Rationale, confusion, 1);
        assert!((r.accuracy - 0.5).abs() < 1e-12);
        assert!((r.f1_macro - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_matches_per_class_oracle() {
        // oracle: compute per-class F1 straight from (label, pred) pairs
        let mut rng = RngStream::from_seed(10);
        let classes = 4;
        let pairs: Vec<(usize, usize)> = (0..500)
            .map(|_| (rng.usize_below(classes), rng.usize_below(classes)))
            .collect();
        let mut confusion = vec![vec![0usize; classes]; classes];
        for &(t, p) in &pairs {
            confusion[t][p] += 1;
        }
        let mut oracle = 0.0f64;
        for c in 0..classes {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
            let fneg = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            if prec + rec > 0.0 {
                oracle += 2.0 * prec * rec / (prec + rec);
            }
        }
        oracle /= classes as f64;
        assert!((macro_f1(&confusion) - oracle).abs() < 1e-12);
        assert!((micro_f1(&confusion) - pairs.iter().filter(|&&(t, p)| t == p).count() as f64 / 500.0).abs() < 1e-12);
    }

    #[test]
    fn rationale_with_k_equal_d_is_unmasked_accuracy() {
        let (explainer, approximator, map, bb, data) = tiny_setup();
        let r = rationale_fidelity_models(&explainer, &approximator, &map, map.d(), &bb, &data)
            .unwrap();
        // direct unmasked accuracy
        let labels = blackbox_labels(&bb, &data).unwrap();
        let lp = approximator.predict(data.x()).unwrap();
        let correct = lp
            .data()
            .chunks_exact(2)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        assert_eq!(r.accuracy, correct as f64 / data.n() as f64);
    }

    #[test]
    fn approximator_fidelity_deterministic_given_seed() {
        let (explainer, approximator, map, bb, data) = tiny_setup();
        let run = |seed| {
            approximator_fidelity_models(
                &explainer,
                &approximator,
                &map,
                2,
                0.5,
                6,
                &bb,
                &data,
                &RngStream::from_seed(seed).child(tags::EVAL),
            )
            .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.confusion, b.confusion);
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn empty_data_cannot_be_constructed() {
        // zero-row datasets are rejected at tensor construction, so the
        // fidelity entry points can never see one
        assert!(Tensor::new(vec![0, 8], vec![]).is_err());
    }

    #[test]
    fn selection_quality_arithmetic() {
        // selected == truth -> 1/1; disjoint -> 0/0; half-hit -> 0.5/1.0
        let sel = [0usize, 1];
        let truth_full = [0usize, 1];
        let hits = sel.iter().filter(|j| truth_full.contains(j)).count();
        assert_eq!(hits as f64 / 2.0, 1.0);
        let truth_disjoint = [2usize, 3];
        let hits2 = sel.iter().filter(|j| truth_disjoint.contains(j)).count();
        assert_eq!(hits2, 0);
        // k = 4 with |truth| = 2 and 2 hits
        let sel4 = [0usize, 1, 2, 3];
        let truth2 = [1usize, 2];
        let hits3 = sel4.iter().filter(|j| truth2.contains(j)).count();
        assert_eq!(hits3 as f64 / 4.0, 0.5);
        assert_eq!(hits3 as f64 / truth2.len() as f64, 1.0);
    }
}
