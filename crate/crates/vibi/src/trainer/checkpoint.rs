//! Checkpoint container.
//!
//! Layout: magic `VIBI`, u16 version (= 1), u32 length of the UTF-8 config
//! JSON, the JSON itself, then repeated tensor records
//! `[u16 name-len, name, u8 rank, u32 dims..., f32 data...]`. All integers
//! and floats little-endian. Save -> load -> save is byte-identical.

use std::path::Path;

use super::VibiConfig;
use crate::chunker::ChunkMap;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Model, Param};
use crate::objective::LossTerms;

const MAGIC: &[u8; 4] = b"VIBI";
const VERSION: u16 = 1;
const EXPLAINER_PREFIX: &str = "explainer.";
const APPROXIMATOR_PREFIX: &str = "approximator.";
const LOSS_TRACE_NAME: &str = "loss_trace";

/// A trained explainer/approximator pair with its full configuration and
/// training-loss trace.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: VibiConfig,
    pub explainer: Vec<Param>,
    pub approximator: Vec<Param>,
    /// Per-batch `(nll, kl, total)` rows in training order.
    pub loss_trace: Vec<LossTerms>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Data(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.explainer {
            write_record(
                &mut out,
                &format!("{EXPLAINER_PREFIX}{}", p.name),
                p.value.shape(),
                p.value.data(),
            )?;
        }
        for p in &self.approximator {
            write_record(
                &mut out,
                &format!("{APPROXIMATOR_PREFIX}{}", p.name),
                p.value.shape(),
                p.value.data(),
            )?;
        }
        let trace: Vec<f32> = self
            .loss_trace
            .iter()
            .flat_map(|t| [t.nll, t.kl, t.total])
            .collect();
        write_record(&mut out, LOSS_TRACE_NAME, &[self.loss_trace.len(), 3], &trace)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Data(format!(
                "checkpoint: bad magic {:?}, expected {:?}",
                &magic[..4.min(magic.len())],
                MAGIC
            )));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let json_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let json = r.take(json_len)?;
        let config: VibiConfig = serde_json::from_slice(json)
            .map_err(|e| Error::Data(format!("checkpoint config JSON: {e}")))?;

        let mut explainer = Vec::new();
        let mut approximator = Vec::new();
        let mut loss_trace = Vec::new();
        while r.offset < bytes.len() {
            let (name, dims, data) = read_record(&mut r)?;
            if let Some(short) = name.strip_prefix(EXPLAINER_PREFIX) {
                explainer.push(Param {
                    name: short.to_string(),
                    value: Tensor::new(dims, data)?,
                });
            } else if let Some(short) = name.strip_prefix(APPROXIMATOR_PREFIX) {
                approximator.push(Param {
                    name: short.to_string(),
                    value: Tensor::new(dims, data)?,
                });
            } else if name == LOSS_TRACE_NAME {
                if dims.len() != 2 || dims[1] != 3 {
                    return Err(Error::Data(format!(
                        "checkpoint: loss trace dims {:?}",
                        dims
                    )));
                }
                let beta = config.beta as f32;
                loss_trace = data
                    .chunks_exact(3)
                    .map(|c| LossTerms {
                        nll: c[0],
                        kl: c[1],
                        beta,
                        total: c[2],
                    })
                    .collect();
            } else {
                return Err(Error::Data(format!("checkpoint: unknown record {name}")));
            }
        }
        Ok(Checkpoint {
            config,
            explainer,
            approximator,
            loss_trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn chunk_map(&self) -> Result<ChunkMap> {
        self.config.chunks.build()
    }

    /// The configuration as pretty-printed JSON (the same serialization the
    /// container embeds, reformatted).
    pub fn config_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Data(format!("config serialization: {e}")))
    }

    pub fn explainer_model(&self) -> Result<Model> {
        Model::from_params(self.config.explainer.clone(), self.explainer.clone())
    }

    pub fn approximator_model(&self) -> Result<Model> {
        Model::from_params(self.config.approximator.clone(), self.approximator.clone())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint: truncated at offset {} (need {len} bytes, {} remain)",
                self.offset,
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("record name too long: {name}")));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("record rank {} too large", dims.len())));
    }
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::InvalidArgument(format!(
            "record {name}: dims {:?} but {} values",
            dims,
            data.len()
        )));
    }
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn read_record(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|e| Error::Data(format!("checkpoint: record name not UTF-8: {e}")))?
        .to_string();
    let rank = r.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
    }
    let numel: usize = dims.iter().product();
    let raw = r.take(numel * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::ChunkSpec;
    use crate::nets::{dense_approximator_arch, dense_explainer_arch};
    use crate::rng::RngStream;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = RngStream::from_seed(42);
        let explainer = Model::new(dense_explainer_arch(32, 16, 8), &mut rng).unwrap();
        let approximator = Model::new(dense_approximator_arch(32, 16, 2), &mut rng).unwrap();
        let config = VibiConfig {
            k: 2,
            tau: 0.5,
            beta: 0.1,
            train_samples: 4,
            lr: 5e-3,
            batch: 50,
            epochs: 3,
            seed: 7,
            chunks: ChunkSpec::TokenGroup {
                n_tokens: 8,
                group_size: 1,
                features_per_token: 4,
            },
            explainer: explainer.spec().clone(),
            approximator: approximator.spec().clone(),
            eval_samples: 12,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: None,
            val_limit: 1000,
            soft_labels: false,
        };
        Checkpoint {
            config,
            explainer: explainer.params().to_vec(),
            approximator: approximator.params().to_vec(),
            loss_trace: vec![
                LossTerms { nll: 0.9, kl: 0.2, beta: 0.1, total: 0.92 },
                LossTerms { nll: 0.7, kl: 0.15, beta: 0.1, total: 0.715 },
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample_checkpoint();
        let bytes1 = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes1).unwrap();
        let bytes2 = loaded.to_bytes().unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VIBI");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    }

    #[test]
    fn truncation_and_bad_magic_are_data_errors() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn models_rebuild_from_checkpoint() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let e = loaded.explainer_model().unwrap();
        let a = loaded.approximator_model().unwrap();
        assert_eq!(e.params()[0].value, ck.explainer[0].value);
        assert_eq!(a.params()[0].value, ck.approximator[0].value);
        assert_eq!(loaded.chunk_map().unwrap().d(), 8);
        assert_eq!(loaded.loss_trace.len(), 2);
        assert_eq!(loaded.loss_trace[1].kl, 0.15);
    }
}
