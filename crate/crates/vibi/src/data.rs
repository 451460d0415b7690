//! Data ingestion: IDX image/label files and the planted-chunk synthetic
//! task.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::{make_token_chunks, ChunkMap};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::RuleBlackBox;
use crate::rng::{tags, RngStream};

/// A batch-of-rows dataset: `x` is `[n, features]`, labels are optional
/// ground-truth classes (needed only to train black boxes).
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Tensor,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset expects [n, features], got {:?}",
                x.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != x.shape()[0] {
                return Err(Error::Data(format!(
                    "{} labels for {} instances",
                    l.len(),
                    x.shape()[0]
                )));
            }
        }
        Ok(Dataset { x, labels })
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let f = self.features();
        &self.x.data()[i * f..(i + 1) * f]
    }

    /// Gather rows by index into a new `[len, features]` tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), f], data).expect("row gather shape")
    }

    /// First `n` rows as a new dataset (used to cap validation cost).
    /// Clamped to at least one row; datasets are never empty.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.n()).max(1);
        let f = self.features();
        Dataset {
            x: Tensor::new(vec![n, f], self.x.data()[..n * f].to_vec()).expect("head shape"),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    fn slice(&self, start: usize, end: usize) -> Dataset {
        let f = self.features();
        Dataset {
            x: Tensor::new(vec![end - start, f], self.x.data()[start * f..end * f].to_vec())
                .expect("slice shape"),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }
}

/// Train/validation/test partition.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Split 80/10/10 in row order (rows are i.i.d. for generated data).
pub fn split_80_10_10(data: Dataset) -> Result<DataSplits> {
    let n = data.n();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset with {n} rows is too small to split"
        )));
    }
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    Ok(DataSplits {
        train: data.slice(0, n_train),
        val: data.slice(n_train, n_train + n_val),
        test: data.slice(n_train + n_val, n),
    })
}

// ---- IDX parsing -------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    name: &'a str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated at offset {} (need 4 bytes, {} remain)",
                self.name,
                self.offset,
                self.bytes.len() - self.offset
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated payload at offset {} (need {} bytes, {} remain)",
                self.name,
                self.offset,
                len,
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }
}

/// Parsed IDX image file: pixels scaled to [0, 1] by /255.
#[derive(Debug)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Tensor,
}

pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<IdxImages> {
    let mut r = IdxReader { bytes, offset: 0, name };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{name}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} (images)"
        )));
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data(format!(
            "{name}: degenerate dimensions {n}x{rows}x{cols}"
        )));
    }
    let raw = r.payload(n * rows * cols)?;
    if r.offset != bytes.len() {
        return Err(Error::Data(format!(
            "{name}: {} trailing bytes after payload",
            bytes.len() - r.offset
        )));
    }
    let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxImages {
        n,
        rows,
        cols,
        pixels: Tensor::new(vec![n, rows * cols], data)?,
    })
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<usize>> {
    let mut r = IdxReader { bytes, offset: 0, name };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{name}: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} (labels)"
        )));
    }
    let n = r.u32()? as usize;
    let raw = r.payload(n)?;
    if r.offset != bytes.len() {
        return Err(Error::Data(format!(
            "{name}: {} trailing bytes after payload",
            bytes.len() - r.offset
        )));
    }
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Load a paired IDX image/label dataset from disk.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(IdxImages, Dataset)> {
    let images = parse_idx_images(&read_file(images_path)?, &images_path.to_string_lossy())?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &labels_path.to_string_lossy())?;
    if labels.len() != images.n {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.n,
            labels.len()
        )));
    }
    let ds = Dataset::new(images.pixels.clone(), Some(labels))?;
    Ok((images, ds))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.to_string_lossy())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// The conventional IDX file names inside a dataset directory.
pub const IDX_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const IDX_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const IDX_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const IDX_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Load the digit dataset from a directory with the standard file names,
/// splitting the 60k training file into 50k train / 10k validation and
/// keeping the 10k test file as the test split.
pub fn load_mnist_dir(dir: &Path) -> Result<DataSplits> {
    let (_, train_full) = load_idx(&dir.join(IDX_TRAIN_IMAGES), &dir.join(IDX_TRAIN_LABELS))?;
    let (_, test) = load_idx(&dir.join(IDX_TEST_IMAGES), &dir.join(IDX_TEST_LABELS))?;
    let n = train_full.n();
    let n_train = if n > 10_000 { n - 10_000 } else { n * 8 / 10 };
    Ok(DataSplits {
        train: train_full.slice(0, n_train),
        val: train_full.slice(n_train, n),
        test,
    })
}

// ---- synthetic task ------------------------------------------------------------

/// Planted-chunk task description: `d` chunks of `features_per_chunk`
/// standard-normal features; the label depends only on the `relevant`
/// chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub d: usize,
    pub features_per_chunk: usize,
    pub relevant: Vec<usize>,
    pub n: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 8,
            features_per_chunk: 4,
            relevant: vec![2, 5],
            n: 2000,
        }
    }
}

/// A generated task: data splits, the chunk map, the rule oracle and the
/// per-task ground-truth chunk set.
pub struct SynthTask {
    pub splits: DataSplits,
    pub map: ChunkMap,
    pub blackbox: RuleBlackBox,
    pub relevant: Vec<usize>,
}

/// Deterministically generate the synthetic task for `(spec, seed)`.
pub fn gen_synth(spec: &SynthSpec, seed: u64) -> Result<SynthTask> {
    if spec.relevant.is_empty() {
        return Err(Error::InvalidArgument("synthetic spec: empty relevant set".into()));
    }
    if spec.n < 10 {
        return Err(Error::InvalidArgument(format!(
            "synthetic spec: n = {} too small",
            spec.n
        )));
    }
    let map = make_token_chunks(spec.d, 1, spec.features_per_chunk)?;
    let blackbox = RuleBlackBox::new(map.clone(), spec.relevant.clone())?;
    let features = map.feature_count();
    let mut rng = RngStream::from_seed(seed).child(tags::DATA);
    let data: Vec<f32> = (0..spec.n * features).map(|_| rng.normal() as f32).collect();
    let x = Tensor::new(vec![spec.n, features], data)?;
    let splits = split_80_10_10(Dataset::new(x, None)?)?;
    Ok(SynthTask {
        splits,
        map,
        blackbox,
        relevant: spec.relevant.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::predict_labels;

    fn idx_image_fixture() -> Vec<u8> {
        // 2 images of 2x2 pixels
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20]);
        b
    }

    #[test]
    fn idx_fixture_round_trips_exact_values() {
        let imgs = parse_idx_images(&idx_image_fixture(), "fixture").unwrap();
        assert_eq!((imgs.n, imgs.rows, imgs.cols), (2, 2, 2));
        let want: Vec<f32> = [0u8, 51, 102, 153, 204, 255, 10, 20]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(imgs.pixels.data(), &want[..]);
    }

    #[test]
    fn idx_truncation_names_offset() {
        let b = idx_image_fixture();
        let err = parse_idx_images(&b[..10], "fixture").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("offset"), "{msg}");
        let err2 = parse_idx_images(&b[..b.len() - 3], "fixture").unwrap_err();
        assert!(format!("{err2}").contains("offset 16"), "{err2}");
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let mut b = idx_image_fixture();
        b[3] = 0x99;
        assert!(parse_idx_images(&b, "fixture").is_err());
        // labels parser refuses image magic
        assert!(parse_idx_labels(&idx_image_fixture(), "fixture").is_err());
    }

    #[test]
    fn idx_label_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, idx_image_fixture()).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&lp, lb).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(format!("{err}").contains("2 images but 3 labels"));
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let spec = SynthSpec::default();
        let a = gen_synth(&spec, 9).unwrap();
        let b = gen_synth(&spec, 9).unwrap();
        assert_eq!(a.splits.train.x().data(), b.splits.train.x().data());
        let c = gen_synth(&spec, 10).unwrap();
        assert_ne!(a.splits.train.x().data(), c.splits.train.x().data());
    }

    #[test]
    fn synth_split_sizes() {
        let t = gen_synth(&SynthSpec::default(), 1).unwrap();
        assert_eq!(t.splits.train.n(), 1600);
        assert_eq!(t.splits.val.n(), 200);
        assert_eq!(t.splits.test.n(), 200);
        assert_eq!(t.splits.train.features(), 32);
    }

    #[test]
    fn synth_labels_are_balanced() {
        // Monte-Carlo check of the generator at n = 10^4
        let spec = SynthSpec {
            n: 10_000,
            ..SynthSpec::default()
        };
        let t = gen_synth(&spec, 123).unwrap();
        let mut ones = 0usize;
        let mut total = 0usize;
        for split in [&t.splits.train, &t.splits.val, &t.splits.test] {
            let labels = predict_labels(&t.blackbox, split.x()).unwrap();
            ones += labels.iter().filter(|&&l| l == 1).count();
            total += labels.len();
        }
        let frac = ones as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "label balance {frac}");
    }

    #[test]
    fn synth_rejects_degenerate_spec() {
        let spec = SynthSpec {
            relevant: vec![],
            ..SynthSpec::default()
        };
        assert!(gen_synth(&spec, 0).is_err());
    }
}
