//! Explanation export: per-instance JSON records and, for grid chunkings,
//! a P5 PGM heatmap in which selected-chunk pixels are forced to 255 and
//! the rest carry the scaled input.

use serde::Serialize;

use crate::chunker::{ChunkMap, ChunkSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{argmax, BlackBox};
use crate::sampler::hard_topk;
use crate::trainer::Checkpoint;

/// One exported explanation.
#[derive(Debug, Clone, Serialize)]
pub struct ExplanationRecord {
    pub instance_id: u64,
    /// Selected chunk indices, ascending.
    pub selected: Vec<usize>,
    /// Per-chunk attribution probabilities `p_j(x)`; sums to 1 within 1e-5.
    pub attribution: Vec<f32>,
    pub black_box_label: usize,
    pub approximator_label: usize,
    pub k: usize,
    pub chunk_map: ChunkSpec,
}

pub struct Explanation {
    pub record: ExplanationRecord,
    /// P5 PGM bytes for grid chunkings; absent otherwise.
    pub heatmap: Option<Vec<u8>>,
    /// Set when the chunk kind has no heatmap rendering.
    pub note: Option<String>,
}

impl Explanation {
    pub fn record_json(&self) -> String {
        serde_json::to_string_pretty(&self.record).expect("record serializes")
    }
}

/// Export the explanation of one instance from a trained checkpoint:
/// the explainer's attribution scores, the exact hard top-k selection, the
/// black-box label and the approximator's prediction on the hard-masked
/// input. Deterministic.
pub fn export_explanation(
    ck: &Checkpoint,
    bb: &dyn BlackBox,
    data: &Dataset,
    instance: usize,
) -> Result<Explanation> {
    if instance >= data.n() {
        return Err(Error::InvalidArgument(format!(
            "instance {instance} out of range for {} rows",
            data.n()
        )));
    }
    let map = ck.chunk_map()?;
    let explainer = ck.explainer_model()?;
    let approximator = ck.approximator_model()?;
    let k = ck.config.k;

    let x_row = data.gather_rows(&[instance]);
    let elp = explainer.predict(&x_row)?;
    let log_p = elp.data();
    let attribution: Vec<f32> = log_p.iter().map(|v| v.exp()).collect();
    let mass: f32 = attribution.iter().sum();
    if (mass - 1.0).abs() > 1e-5 {
        return Err(Error::Numeric(format!(
            "attribution mass {mass} drifted from 1"
        )));
    }
    let mask = hard_topk(log_p, k)?;

    let t = map.apply_mask(
        &crate::diffcore::Tensor::new(vec![map.feature_count()], x_row.data().to_vec())?,
        &mask.values(),
    )?;
    let t_batch = t.reshaped(vec![1, map.feature_count()])?;
    let alp = approximator.predict(&t_batch)?;
    let approximator_label = argmax(alp.data());
    let black_box_label = argmax(bb.predict_log_probs(&x_row)?.data());

    let (heatmap, note) = match map.spec() {
        ChunkSpec::GridPatch { .. } => (
            Some(render_heatmap_pgm(data.row(instance), &map, mask.selected())?),
            None,
        ),
        ChunkSpec::TokenGroup { .. } => (
            None,
            Some("token-group chunking has no heatmap rendering; JSON only".to_string()),
        ),
    };

    Ok(Explanation {
        record: ExplanationRecord {
            instance_id: instance as u64,
            selected: mask.selected().to_vec(),
            attribution,
            black_box_label,
            approximator_label,
            k,
            chunk_map: map.spec().clone(),
        },
        heatmap,
        note,
    })
}

/// Render a grid-chunked instance as a binary (P5) portable graymap:
/// pixels of selected chunks carry 255, the rest `round(x * 255)` clamped
/// to [0, 255].
pub fn render_heatmap_pgm(x: &[f32], map: &ChunkMap, selected: &[usize]) -> Result<Vec<u8>> {
    let ChunkSpec::GridPatch { height, width, .. } = *map.spec() else {
        return Err(Error::InvalidArgument(
            "heatmap rendering needs a grid chunking".into(),
        ));
    };
    if x.len() != height * width {
        return Err(Error::InvalidArgument(format!(
            "instance has {} features, grid is {height}x{width}",
            x.len()
        )));
    }
    let mut sel = vec![false; map.d()];
    for &j in selected {
        if j >= map.d() {
            return Err(Error::InvalidArgument(format!(
                "selected chunk {j} out of range"
            )));
        }
        sel[j] = true;
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for (i, &v) in x.iter().enumerate() {
        if sel[map.chunk_of(i)] {
            out.push(255);
        } else {
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::make_grid_chunks;

    #[test]
    fn heatmap_has_exactly_selected_pixels_at_255() {
        // 28x28 grid, 4x4 patches, k = 4 -> exactly 64 forced pixels
        let map = make_grid_chunks(28, 28, 4, 4).unwrap();
        let x = vec![0.3f32; 784]; // scaled value 77, never 255
        let pgm = render_heatmap_pgm(&x, &map, &[0, 7, 23, 48]).unwrap();
        let header = b"P5\n28 28\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let body = &pgm[header.len()..];
        assert_eq!(body.len(), 784);
        let highlighted = body.iter().filter(|&&b| b == 255).count();
        assert_eq!(highlighted, 4 * 16);
        assert_eq!(body.iter().filter(|&&b| b == 77).count(), 784 - 64);
    }

    #[test]
    fn heatmap_is_deterministic() {
        let map = make_grid_chunks(4, 4, 2, 2).unwrap();
        let x: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let a = render_heatmap_pgm(&x, &map, &[1, 2]).unwrap();
        let b = render_heatmap_pgm(&x, &map, &[1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heatmap_rejects_token_maps() {
        let map = crate::chunker::make_token_chunks(4, 1, 4).unwrap();
        assert!(render_heatmap_pgm(&[0.0; 16], &map, &[0]).is_err());
    }
}
