//! Cognitive chunks: the unit of explanation.
//!
//! A `ChunkMap` partitions the raw feature indices of an input into `d`
//! chunks (image patches or token groups). Selection weights are defined
//! per chunk and expanded to features when masking: `t_i = x_i * z_{chunk(i)}`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Declarative description of a chunking; this is what configs and
/// checkpoints carry, a `ChunkMap` is derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChunkSpec {
    /// Non-overlapping patches over a `height x width` single-channel image.
    GridPatch {
        height: usize,
        width: usize,
        patch_h: usize,
        patch_w: usize,
    },
    /// Consecutive groups of tokens, each token carrying
    /// `features_per_token` raw features.
    TokenGroup {
        n_tokens: usize,
        group_size: usize,
        features_per_token: usize,
    },
}

impl ChunkSpec {
    pub fn build(&self) -> Result<ChunkMap> {
        match *self {
            ChunkSpec::GridPatch {
                height,
                width,
                patch_h,
                patch_w,
            } => make_grid_chunks(height, width, patch_h, patch_w),
            ChunkSpec::TokenGroup {
                n_tokens,
                group_size,
                features_per_token,
            } => make_token_chunks(n_tokens, group_size, features_per_token),
        }
    }
}

/// Exact partition of `0..feature_count` into `d` non-empty chunks.
/// Immutable after construction and safely shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkMap {
    spec: ChunkSpec,
    d: usize,
    feature_count: usize,
    members: Vec<Vec<usize>>,
    chunk_of: Vec<usize>,
}

impl ChunkMap {
    fn from_members(spec: ChunkSpec, feature_count: usize, members: Vec<Vec<usize>>) -> Result<Self> {
        let d = members.len();
        if d == 0 {
            return Err(Error::InvalidArgument("chunk map with zero chunks".into()));
        }
        let mut chunk_of = vec![usize::MAX; feature_count];
        for (j, ms) in members.iter().enumerate() {
            if ms.is_empty() {
                return Err(Error::InvalidArgument(format!("chunk {j} is empty")));
            }
            for &i in ms {
                if i >= feature_count {
                    return Err(Error::InvalidArgument(format!(
                        "chunk {j} references feature {i} >= {feature_count}"
                    )));
                }
                if chunk_of[i] != usize::MAX {
                    return Err(Error::InvalidArgument(format!(
                        "feature {i} owned by chunks {} and {j}",
                        chunk_of[i]
                    )));
                }
                chunk_of[i] = j;
            }
        }
        if let Some(orphan) = chunk_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::InvalidArgument(format!(
                "feature {orphan} not covered by any chunk"
            )));
        }
        Ok(ChunkMap {
            spec,
            d,
            feature_count,
            members,
            chunk_of,
        })
    }

    pub fn spec(&self) -> &ChunkSpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    /// Sorted raw feature indices owned by chunk `j`.
    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    /// Chunk owning feature `i`.
    pub fn chunk_of(&self, i: usize) -> usize {
        self.chunk_of[i]
    }

    /// Feature -> chunk table, usable as a gather index.
    pub fn chunk_index_table(&self) -> &[usize] {
        &self.chunk_of
    }

    /// Mask a flat instance: `t_i = x_i * z_{chunk(i)}`.
    pub fn apply_mask(&self, x: &Tensor, z: &[f32]) -> Result<Tensor> {
        if x.numel() != self.feature_count {
            return Err(Error::InvalidArgument(format!(
                "apply_mask: input has {} features, map expects {}",
                x.numel(),
                self.feature_count
            )));
        }
        if z.len() != self.d {
            return Err(Error::InvalidArgument(format!(
                "apply_mask: weight vector length {} != d = {}",
                z.len(),
                self.d
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * z[self.chunk_of[i]])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Graph form of the mask for a batch: `x` is `[N, feature_count]`,
    /// `z` is `[N, d]`; the result is `[N, feature_count]`. Differentiable
    /// w.r.t. both operands.
    pub fn apply_mask_graph(
        &self,
        g: &mut Graph<impl crate::diffcore::Elem>,
        x: NodeId,
        z: NodeId,
    ) -> Result<NodeId> {
        let xs = g.value(x)?.shape().to_vec();
        let zs = g.value(z)?.shape().to_vec();
        if xs.len() != 2 || xs[1] != self.feature_count {
            return Err(Error::InvalidArgument(format!(
                "apply_mask_graph: x shape {:?}, expected [N, {}]",
                xs, self.feature_count
            )));
        }
        if zs.len() != 2 || zs[1] != self.d || zs[0] != xs[0] {
            return Err(Error::InvalidArgument(format!(
                "apply_mask_graph: z shape {:?}, expected [{}, {}]",
                zs, xs[0], self.d
            )));
        }
        let weights = g.gather(z, &self.chunk_of)?;
        g.mul(x, weights)
    }
}

/// Grid chunking: `d = (height/patch_h) * (width/patch_w)`, chunk `j` owning
/// the pixels of patch `j` in row-major patch order. Dimensions must divide
/// exactly; inputs with partial patches are rejected.
pub fn make_grid_chunks(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<ChunkMap> {
    if height == 0 || width == 0 || patch_h == 0 || patch_w == 0 {
        return Err(Error::InvalidArgument("grid chunking with zero dimension".into()));
    }
    if !height.is_multiple_of(patch_h) || !width.is_multiple_of(patch_w) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_h}x{patch_w} does not divide image {height}x{width}"
        )));
    }
    let (ph, pw) = (height / patch_h, width / patch_w);
    let mut members = Vec::with_capacity(ph * pw);
    for py in 0..ph {
        for px in 0..pw {
            let mut ms = Vec::with_capacity(patch_h * patch_w);
            for r in 0..patch_h {
                for c in 0..patch_w {
                    ms.push((py * patch_h + r) * width + px * patch_w + c);
                }
            }
            members.push(ms);
        }
    }
    ChunkMap::from_members(
        ChunkSpec::GridPatch {
            height,
            width,
            patch_h,
            patch_w,
        },
        height * width,
        members,
    )
}

/// Token chunking: `d = n_tokens / group_size`, chunk `j` owning all
/// features of tokens `[j*group_size, (j+1)*group_size)`.
pub fn make_token_chunks(n_tokens: usize, group_size: usize, features_per_token: usize) -> Result<ChunkMap> {
    if n_tokens == 0 || group_size == 0 || features_per_token == 0 {
        return Err(Error::InvalidArgument("token chunking with zero dimension".into()));
    }
    if !n_tokens.is_multiple_of(group_size) {
        return Err(Error::InvalidArgument(format!(
            "group size {group_size} does not divide {n_tokens} tokens"
        )));
    }
    let d = n_tokens / group_size;
    let mut members = Vec::with_capacity(d);
    for j in 0..d {
        let mut ms = Vec::with_capacity(group_size * features_per_token);
        for tok in j * group_size..(j + 1) * group_size {
            for f in 0..features_per_token {
                ms.push(tok * features_per_token + f);
            }
        }
        members.push(ms);
    }
    ChunkMap::from_members(
        ChunkSpec::TokenGroup {
            n_tokens,
            group_size,
            features_per_token,
        },
        n_tokens * features_per_token,
        members,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;

    #[test]
    fn mnist_grid_has_49_chunks() {
        let m = make_grid_chunks(28, 28, 4, 4).unwrap();
        assert_eq!(m.d(), 49);
        assert_eq!(m.feature_count(), 784);
        assert_eq!(m.members(0).len(), 16);
    }

    #[test]
    fn tiny_grids() {
        assert_eq!(make_grid_chunks(2, 2, 1, 1).unwrap().d(), 4);
        assert_eq!(make_grid_chunks(28, 28, 2, 2).unwrap().d(), 196);
    }

    #[test]
    fn non_divisible_grid_rejected() {
        assert!(make_grid_chunks(28, 28, 5, 5).is_err());
        assert!(make_grid_chunks(27, 28, 4, 4).is_err());
    }

    #[test]
    fn token_chunk_counts() {
        assert_eq!(make_token_chunks(750, 5, 1).unwrap().d(), 150);
        assert_eq!(make_token_chunks(750, 1, 1).unwrap().d(), 750);
        let m = make_token_chunks(8, 1, 4).unwrap();
        assert_eq!(m.d(), 8);
        assert_eq!(m.feature_count(), 32);
        assert!(make_token_chunks(10, 3, 1).is_err());
    }

    #[test]
    fn partition_property() {
        for m in [
            make_grid_chunks(12, 8, 4, 2).unwrap(),
            make_token_chunks(20, 4, 3).unwrap(),
        ] {
            let total: usize = (0..m.d()).map(|j| m.members(j).len()).sum();
            assert_eq!(total, m.feature_count());
            let mut seen = vec![false; m.feature_count()];
            for j in 0..m.d() {
                for &i in m.members(j) {
                    assert!(!seen[i], "feature {i} in two chunks");
                    seen[i] = true;
                    assert_eq!(m.chunk_of(i), j);
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn mask_identity_zero_and_mixed() {
        let m = make_token_chunks(4, 1, 1).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.apply_mask(&x, &[1.0; 4]).unwrap().data(), x.data());
        assert_eq!(m.apply_mask(&x, &[0.0; 4]).unwrap().data(), &[0.0; 4]);
        assert_eq!(
            m.apply_mask(&x, &[1.0, 0.0, 1.0, 0.0]).unwrap().data(),
            &[1.0, 0.0, 3.0, 0.0]
        );
        assert!(m.apply_mask(&x, &[1.0; 3]).is_err());
    }

    #[test]
    fn mask_grad_sums_upstream_over_chunk() {
        // d apply_mask / d z_j = sum_{i in chunk j} x_i * upstream_i
        let m = make_token_chunks(4, 2, 1).unwrap(); // 2 chunks of 2 features
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let z = g.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.25]).unwrap(), true);
        let t = m.apply_mask_graph(&mut g, x, z).unwrap();
        let s = g.sum_all(t).unwrap(); // upstream all ones
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).unwrap().unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn mask_linear_in_z() {
        let m = make_grid_chunks(4, 4, 2, 2).unwrap();
        let x = Tensor::from_vec((0..16).map(|i| i as f32 * 0.5 - 3.0).collect());
        let z1 = [0.2, 0.4, 0.6, 0.8];
        let z2 = [0.5, 0.1, 0.9, 0.3];
        let lhs = m
            .apply_mask(&x, &z1.iter().zip(z2).map(|(a, b)| a + b).collect::<Vec<_>>())
            .unwrap();
        let t1 = m.apply_mask(&x, &z1).unwrap();
        let t2 = m.apply_mask(&x, &z2).unwrap();
        for i in 0..16 {
            assert!((lhs.data()[i] - (t1.data()[i] + t2.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_round_trips_through_serde() {
        let spec = ChunkSpec::GridPatch {
            height: 28,
            width: 28,
            patch_h: 4,
            patch_w: 4,
        };
        let s = serde_json::to_string(&spec).unwrap();
        let back: ChunkSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
