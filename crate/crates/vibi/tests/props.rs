//! Property tests over the serialization formats and the chunk/mask
//! algebra.

use proptest::prelude::*;

use vibi::chunker::{make_grid_chunks, make_token_chunks, ChunkSpec};
use vibi::diffcore::{Tensor, TensorOf};
use vibi::nets::{dense_approximator_arch, dense_explainer_arch, Param};
use vibi::objective::kl_to_uniform;
use vibi::trainer::{Checkpoint, VibiConfig};

fn small_dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

fn finite_f32() -> impl Strategy<Value = f32> {
    (-1.0e3f32..1.0e3).prop_map(|v| if v == 0.0 { 0.0 } else { v })
}

prop_compose! {
    fn arb_param(idx: usize)(dims in small_dims())(
        data in prop::collection::vec(finite_f32(), dims.iter().product::<usize>()..=dims.iter().product::<usize>()),
        dims in Just(dims),
    ) -> Param {
        Param { name: format!("p{idx}.w"), value: TensorOf::new(dims, data).unwrap() }
    }
}

fn arb_config() -> impl Strategy<Value = VibiConfig> {
    (1usize..4, 0.05f64..2.0, 0.0f64..10.0, 1usize..5, 1u64..1000).prop_map(
        |(k, tau, beta, l, seed)| VibiConfig {
            k,
            tau,
            beta,
            train_samples: l,
            lr: 1e-3,
            batch: 50,
            epochs: 3,
            seed,
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
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Checkpoint bytes survive load -> save unchanged for arbitrary
    /// parameter contents and hyperparameters.
    #[test]
    fn checkpoint_round_trip(
        config in arb_config(),
        e in prop::collection::vec(arb_param(0), 1..3),
        a in prop::collection::vec(arb_param(1), 1..3),
    ) {
        let ck = Checkpoint { config, explainer: e, approximator: a, loss_trace: vec![] };
        let b1 = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b1).unwrap();
        let b2 = back.to_bytes().unwrap();
        prop_assert_eq!(b1, b2);
    }

    /// Every grid chunking with divisible dimensions partitions the
    /// features exactly.
    #[test]
    fn grid_chunks_partition(ph in 1usize..5, pw in 1usize..5, gh in 1usize..6, gw in 1usize..6) {
        let (h, w) = (ph * gh, pw * gw);
        let map = make_grid_chunks(h, w, ph, pw).unwrap();
        prop_assert_eq!(map.d(), gh * gw);
        let mut seen = vec![false; h * w];
        for j in 0..map.d() {
            for &i in map.members(j) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    /// Masking with all-ones weights is the identity, and masking is
    /// homogeneous in the weights.
    #[test]
    fn mask_identity_and_scaling(
        data in prop::collection::vec(finite_f32(), 24),
        scale in 0.0f32..1.0,
    ) {
        let map = make_token_chunks(6, 1, 4).unwrap();
        let x = Tensor::from_vec(data);
        let ones = vec![1.0f32; 6];
        let masked = map.apply_mask(&x, &ones).unwrap();
        prop_assert_eq!(masked.data(), x.data());
        let scaled = map.apply_mask(&x, &[scale; 6]).unwrap();
        for (t, v) in scaled.data().iter().zip(x.data()) {
            prop_assert_eq!(*t, v * scale);
        }
    }

    /// KL to uniform is nonnegative and zero only at the uniform point.
    #[test]
    fn kl_nonnegative_zero_iff_uniform(raw in prop::collection::vec(0.01f64..1.0, 2..16)) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f32> = raw.iter().map(|&v| (v / s) as f32).collect();
        let kl = kl_to_uniform(&p).unwrap();
        prop_assert!(kl >= 0.0);
        let d = p.len() as f32;
        let max_dev = p.iter().map(|&pi| (pi - 1.0 / d).abs()).fold(0.0f32, f32::max);
        if max_dev > 1e-3 {
            prop_assert!(kl > 0.0, "non-uniform p (dev {}) had zero KL", max_dev);
        }
    }
}
