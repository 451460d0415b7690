//! Training and persistence of model-backed black boxes.
//!
//! The VIBI trainer itself never sees these internals; it consumes the
//! resulting model through the `BlackBox` interface only. The artifact
//! format mirrors the checkpoint container with magic `VIBB`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::BlackboxSection;
use crate::data::Dataset;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nets::{argmax, ArchSpec, Model, Param};
use crate::rng::{tags, RngStream};
use crate::trainer::{adam_step, AdamState};

const MAGIC: &[u8; 4] = b"VIBB";
const VERSION: u16 = 1;

/// Metadata stored in the artifact header JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackboxMeta {
    pub arch: ArchSpec,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// A persisted black-box model.
#[derive(Debug, Clone)]
pub struct BlackboxArtifact {
    pub meta: BlackboxMeta,
    pub params: Vec<Param>,
}

impl BlackboxArtifact {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.meta.arch.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Data(format!("black-box meta: {e}")))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::Data("black-box artifact: bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Data(format!(
                "black-box artifact: unsupported version {version}"
            )));
        }
        let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut off = 10;
        let take = |off: &mut usize, len: usize| -> Result<&[u8]> {
            if *off + len > bytes.len() {
                return Err(Error::Data(format!(
                    "black-box artifact: truncated at offset {off}"
                )));
            }
            let s = &bytes[*off..*off + len];
            *off += len;
            Ok(s)
        };
        let meta: BlackboxMeta = serde_json::from_slice(take(&mut off, json_len)?)
            .map_err(|e| Error::Data(format!("black-box meta JSON: {e}")))?;
        let mut params = Vec::new();
        while off < bytes.len() {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut off, name_len)?)
                .map_err(|e| Error::Data(format!("black-box param name: {e}")))?
                .to_string();
            let rank = take(&mut off, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = take(&mut off, numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Param {
                name,
                value: Tensor::new(dims, data)?,
            });
        }
        Ok(BlackboxArtifact { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Supervised cross-entropy training of a classifier on labeled data.
/// Deterministic given `(arch, data, cfg, seed)`.
pub fn train_classifier(
    train: &Dataset,
    arch: ArchSpec,
    cfg: &BlackboxSection,
    seed: u64,
) -> Result<Model> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::InvalidArgument("black-box training needs labeled data".into()))?
        .to_vec();
    let root = RngStream::from_seed(seed ^ 0xb1ac_bb0c);
    let mut model = Model::new(arch, &mut root.child(tags::INIT))?;
    let mut adam = {
        let refs: Vec<&Param> = model.params().iter().collect();
        AdamState::new(&refs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    };
    let n = train.n();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.child_path(&[tags::SHUFFLE, epoch as u64]).shuffle(&mut order);
        for batch_idx in order.chunks(cfg.batch) {
            let x = train.gather_rows(batch_idx);
            let y: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();
            let mut g: Graph<f32> = Graph::new();
            let xb = g.leaf(x, false);
            let bind = model.bind(&mut g, true);
            let out = model.forward(&mut g, &bind, xb)?;
            let picked = g.nll_pick(out, &y)?;
            let loss = g.mean_all(picked)?;
            let lv = g.value(loss)?.item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "black-box training diverged at epoch {epoch} (loss {lv})"
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bind
                .ids()
                .iter()
                .map(|&id| Ok(g.grad(id)?.cloned()))
                .collect::<Result<_>>()?;
            let mut refs: Vec<&mut Param> = model.params_mut().iter_mut().collect();
            adam_step(&mut refs, &grads, &mut adam, cfg.lr)?;
        }
    }
    Ok(model)
}

/// Classification accuracy of a model against a dataset's own labels.
pub fn classifier_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidArgument("accuracy needs labeled data".into()))?;
    let classes = *model.output_shape().last().unwrap();
    let mut correct = 0usize;
    let mut start = 0usize;
    let block = 512;
    while start < data.n() {
        let end = (start + block).min(data.n());
        let idx: Vec<usize> = (start..end).collect();
        let lp = model.predict(&data.gather_rows(&idx))?;
        for (ri, i) in (start..end).enumerate() {
            if argmax(&lp.data()[ri * classes..(ri + 1) * classes]) == labels[i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / data.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::dense_approximator_arch;

    fn labeled_blobs(n: usize, seed: u64) -> Dataset {
        // two well-separated gaussian blobs in 8 dimensions
        let mut rng = RngStream::from_seed(seed);
        let mut data = Vec::with_capacity(n * 8);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let center = if y == 0 { -1.5f32 } else { 1.5 };
            for _ in 0..8 {
                data.push(center + rng.normal() as f32 * 0.5);
            }
            labels.push(y);
        }
        Dataset::new(Tensor::new(vec![n, 8], data).unwrap(), Some(labels)).unwrap()
    }

    #[test]
    fn classifier_learns_separable_blobs() {
        let train = labeled_blobs(400, 1);
        let test = labeled_blobs(100, 2);
        let cfg = BlackboxSection {
            epochs: 5,
            lr: 5e-3,
            ..Default::default()
        };
        let model = train_classifier(&train, dense_approximator_arch(8, 16, 2), &cfg, 3).unwrap();
        let acc = classifier_accuracy(&model, &test).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn artifact_round_trips() {
        let train = labeled_blobs(50, 4);
        let cfg = BlackboxSection {
            epochs: 1,
            ..Default::default()
        };
        let model = train_classifier(&train, dense_approximator_arch(8, 8, 2), &cfg, 5).unwrap();
        let art = BlackboxArtifact {
            meta: BlackboxMeta {
                arch: model.spec().clone(),
                seed: 5,
                test_accuracy: Some(0.9),
            },
            params: model.params().to_vec(),
        };
        let bytes = art.to_bytes().unwrap();
        let back = BlackboxArtifact::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m2 = back.model().unwrap();
        assert_eq!(m2.params()[0].value, model.params()[0].value);
        assert!(BlackboxArtifact::from_bytes(&bytes[..8]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let train = labeled_blobs(100, 6);
        let cfg = BlackboxSection {
            epochs: 2,
            ..Default::default()
        };
        let a = train_classifier(&train, dense_approximator_arch(8, 8, 2), &cfg, 7).unwrap();
        let b = train_classifier(&train, dense_approximator_arch(8, 8, 2), &cfg, 7).unwrap();
        assert_eq!(a.params()[0].value, b.params()[0].value);
    }
}
