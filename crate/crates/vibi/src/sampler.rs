//! Gumbel-softmax top-k machinery.
//!
//! Builds Concrete (Gumbel-softmax) vectors from perturbed chunk
//! log-probabilities and relaxes exact top-k selection as the elementwise
//! maximum of `k` independently sampled Concrete vectors. Exact hard top-k
//! selection serves inference and rationale evaluation.

use crate::diffcore::{Elem, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Continuous relaxation of a k-hot selection: `values[j] = max_l c_j^(l)`
/// over `k` Concrete vectors. Each value lies in (0, 1] and the total mass
/// lies in [1, k].
#[derive(Debug, Clone)]
pub struct RelaxedMask {
    values: Vec<f32>,
    k: usize,
    tau: f64,
}

impl RelaxedMask {
    fn new(mut values: Vec<f32>, k: usize, tau: f64) -> Self {
        // exp underflow can produce exact zeros at extreme temperatures;
        // floor to the smallest positive normal to keep values in (0, 1]
        for v in values.iter_mut() {
            if *v < f32::MIN_POSITIVE {
                *v = f32::MIN_POSITIVE;
            }
        }
        RelaxedMask { values, k, tau }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Exact k-hot selection vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardMask {
    values: Vec<u8>,
    selected: Vec<usize>,
}

impl HardMask {
    pub fn values(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    /// Chosen chunk indices, ascending.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn is_selected(&self, j: usize) -> bool {
        self.values[j] == 1
    }
}

/// Standard Gumbel(0,1) transform of a uniform draw: `-ln(-ln u)`.
pub fn gumbel(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gumbel: u = {u} outside (0, 1)"
        )));
    }
    Ok(-(-u.ln()).ln())
}

/// Concrete (Gumbel-softmax) vector:
/// `c_j = exp((g_j + log_p_j)/tau) / sum_j' exp((g_j' + log_p_j')/tau)`,
/// computed with max-subtraction.
pub fn concrete(log_p: &[f32], g: &[f32], tau: f64) -> Result<Vec<f32>> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("concrete: tau = {tau} must be > 0")));
    }
    if log_p.len() != g.len() || log_p.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "concrete: log_p has {} entries, noise has {}",
            log_p.len(),
            g.len()
        )));
    }
    if log_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("concrete: non-finite log probability".into()));
    }
    let inv_tau = (1.0 / tau) as f32;
    let logits: Vec<f32> = log_p
        .iter()
        .zip(g)
        .map(|(&lp, &gj)| (gj + lp) * inv_tau)
        .collect();
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f32 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

/// Draw the `k` Gumbel noise vectors backing one relaxed mask, in a fixed
/// order: draw `l` fills all `d` coordinates before draw `l+1`.
pub fn draw_noise(rng: &mut RngStream, k: usize, d: usize) -> Vec<Vec<f32>> {
    (0..k)
        .map(|_| (0..d).map(|_| rng.gumbel() as f32).collect())
        .collect()
}

/// Relaxed top-k selection: elementwise maximum of `k` independent Concrete
/// vectors sampled from `log_p` at temperature `tau`.
pub fn relaxed_topk(log_p: &[f32], k: usize, tau: f64, rng: &mut RngStream) -> Result<RelaxedMask> {
    let d = log_p.len();
    validate_k(k, d)?;
    let noise = draw_noise(rng, k, d);
    relaxed_topk_with_noise(log_p, &noise, tau)
}

/// Deterministic core of [`relaxed_topk`] given pre-drawn noise.
pub fn relaxed_topk_with_noise(log_p: &[f32], noise: &[Vec<f32>], tau: f64) -> Result<RelaxedMask> {
    let d = log_p.len();
    let k = noise.len();
    validate_k(k, d)?;
    let mut z = concrete(log_p, &noise[0], tau)?;
    for g in &noise[1..] {
        let c = concrete(log_p, g, tau)?;
        for j in 0..d {
            if c[j] > z[j] {
                z[j] = c[j];
            }
        }
    }
    Ok(RelaxedMask::new(z, k, tau))
}

/// Exact top-k by score: the `k` indices with the largest `log_p`, ties
/// broken toward the lowest index. Returned indices are sorted ascending.
pub fn hard_topk(log_p: &[f32], k: usize) -> Result<HardMask> {
    let d = log_p.len();
    validate_k(k, d)?;
    if log_p.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("hard_topk: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        log_p[b]
            .partial_cmp(&log_p[a])
            .expect("no NaN")
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    let mut values = vec![0u8; d];
    for &j in &selected {
        values[j] = 1;
    }
    Ok(HardMask { values, selected })
}

fn validate_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={d}"
        )));
    }
    Ok(())
}

/// Graph form of one Concrete vector batch: `log_p` is `[N, d]`, `noise` a
/// constant `[N, d]` leaf; output is `[N, d]` rows on the simplex,
/// differentiable w.r.t. `log_p`.
pub fn concrete_graph<E: Elem>(
    g: &mut Graph<E>,
    log_p: NodeId,
    noise: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("concrete: tau = {tau} must be > 0")));
    }
    let perturbed = g.add(log_p, noise)?;
    let scaled = g.mul_scalar(perturbed, E::from_f64(1.0 / tau))?;
    let lsm = g.log_softmax(scaled)?;
    g.exp(lsm)
}

/// Graph form of [`relaxed_topk`] for a batch: folds `k` Concrete vectors
/// with elementwise max. Gradient reaches `log_p` through the argmax branch
/// of every coordinate (first-drawn vector wins ties).
pub fn relaxed_topk_graph<E: Elem>(
    g: &mut Graph<E>,
    log_p: NodeId,
    noise: &[NodeId],
    tau: f64,
) -> Result<NodeId> {
    let d = *g
        .value(log_p)?
        .shape()
        .last()
        .ok_or_else(|| Error::InvalidArgument("relaxed_topk: rank-0 log_p".into()))?;
    validate_k(noise.len(), d)?;
    let mut z = concrete_graph(g, log_p, noise[0], tau)?;
    for &n in &noise[1..] {
        let c = concrete_graph(g, log_p, n, tau)?;
        z = g.emax(z, c)?;
    }
    Ok(z)
}

/// Build the `[N, d]` noise leaf for draw `l` of a batch, row `i` holding
/// the Gumbel noise for instance `i`.
pub fn noise_leaf<E: Elem>(g: &mut Graph<E>, rng: &mut RngStream, n: usize, d: usize) -> NodeId {
    let data: Vec<E> = (0..n * d).map(|_| E::from_f64(rng.gumbel())).collect();
    let t = crate::diffcore::TensorOf::new(vec![n, d], data).expect("shape matches data");
    g.leaf(t, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_fixed_points() {
        // -log(-log e^-1) = 0 and -log(-log e^-e) = -1
        assert!((gumbel((-1.0f64).exp()).unwrap()).abs() < 1e-12);
        assert!((gumbel((-std::f64::consts::E).exp()).unwrap() + 1.0).abs() < 1e-12);
        assert!(gumbel(0.0).is_err());
        assert!(gumbel(1.0).is_err());
        assert!(gumbel(-0.5).is_err());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        // Monte-Carlo oracle against the known Gumbel(0,1) mean
        let mut rng = RngStream::from_seed(2024);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| rng.gumbel()).sum::<f64>() / n as f64;
        assert!(
            (mean - 0.5772156649).abs() < 0.01,
            "sample mean {mean} too far from Euler-Mascheroni"
        );
    }

    #[test]
    fn concrete_uniform_symmetry() {
        let d = 7;
        let log_p = vec![-(d as f32).ln(); d];
        let g = vec![0.42f32; d];
        let c = concrete(&log_p, &g, 0.37).unwrap();
        for &v in &c {
            assert!((v - 1.0 / d as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn concrete_two_class_logistic() {
        // c_1 = logistic((g_1 - g_2)/tau) for equal log-probabilities
        let c = concrete(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((c[0] - 0.731059).abs() < 1e-5, "{}", c[0]);
        assert!((c[1] - 0.268941).abs() < 1e-5, "{}", c[1]);
        let s: f32 = c.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn concrete_sharpens_to_argmax_at_low_tau() {
        let log_p = vec![-1.2f32, -0.3, -2.0, -1.0];
        let g = vec![0.1f32, 0.7, -0.2, 0.05];
        // argmax of g + log_p is index 1
        let c = concrete(&log_p, &g, 0.01).unwrap();
        assert!((c[1] - 1.0).abs() < 1e-3);
        for (j, &v) in c.iter().enumerate() {
            if j != 1 {
                assert!(v < 1e-3);
            }
        }
    }

    #[test]
    fn concrete_rejects_bad_tau() {
        assert!(concrete(&[0.0, 0.0], &[0.0, 0.0], 0.0).is_err());
        assert!(concrete(&[0.0, 0.0], &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn relaxed_topk_k1_is_single_concrete() {
        let log_p = vec![-0.5f32, -1.5, -2.5];
        let mut rng = RngStream::from_seed(5);
        let noise = draw_noise(&mut rng, 1, 3);
        let mask = relaxed_topk_with_noise(&log_p, &noise, 0.7).unwrap();
        let c = concrete(&log_p, &noise[0], 0.7).unwrap();
        assert_eq!(mask.values(), &c[..]);
    }

    #[test]
    fn relaxed_topk_bounds_hold() {
        let mut rng = RngStream::from_seed(99);
        for trial in 0..200 {
            let d = 2 + (trial % 12);
            let k = 1 + (trial % d);
            let log_p: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let mask = relaxed_topk(&log_p, k, 0.05 + (trial % 7) as f64 * 0.2, &mut rng).unwrap();
            let sum: f64 = mask.values().iter().map(|&v| v as f64).sum();
            assert!(sum >= 1.0 - 1e-5 && sum <= k as f64 + 1e-5, "sum {sum} k {k}");
            for &v in mask.values() {
                assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn relaxed_topk_deterministic_for_fixed_seed() {
        let log_p: Vec<f32> = (0..49).map(|j| (-(j as f32) * 0.07).sin()).collect();
        let run = || {
            let mut rng = RngStream::from_seed(1234).child(7);
            relaxed_topk(&log_p, 4, 0.7, &mut rng).unwrap().values().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn relaxed_topk_rejects_k_out_of_range() {
        let mut rng = RngStream::from_seed(1);
        assert!(relaxed_topk(&[0.0, 0.0], 3, 0.5, &mut rng).is_err());
        assert!(relaxed_topk(&[0.0, 0.0], 0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn hard_topk_tie_break_and_edges() {
        let p = [0.1f32, 0.5, 0.2, 0.2];
        let log_p: Vec<f32> = p.iter().map(|v| v.ln()).collect();
        let m = hard_topk(&log_p, 2).unwrap();
        assert_eq!(m.selected(), &[1, 2]);

        let all = hard_topk(&log_p, 4).unwrap();
        assert_eq!(all.values(), vec![1.0; 4]);

        let one_hot = [-30.0f32, -30.0, 0.0, -30.0];
        assert_eq!(hard_topk(&one_hot, 1).unwrap().selected(), &[2]);

        assert!(hard_topk(&log_p, 5).is_err());
    }

    #[test]
    fn hard_topk_shift_invariant() {
        let log_p = vec![-0.7f32, -2.0, -0.1, -1.4, -3.0];
        let shifted: Vec<f32> = log_p.iter().map(|v| v + 11.5).collect();
        assert_eq!(
            hard_topk(&log_p, 2).unwrap().selected(),
            hard_topk(&shifted, 2).unwrap().selected()
        );
    }

    #[test]
    fn graph_and_direct_relaxed_masks_agree() {
        use crate::diffcore::{Graph, TensorOf};
        let d = 6;
        let log_p: Vec<f32> = (0..d).map(|j| -0.3 * j as f32 - 0.8).collect();
        let mut rng = RngStream::from_seed(77);
        let noise = draw_noise(&mut rng, 3, d);

        let direct = relaxed_topk_with_noise(&log_p, &noise, 0.7).unwrap();

        let mut g: Graph<f32> = Graph::new();
        let lp = g.leaf(TensorOf::new(vec![1, d], log_p.clone()).unwrap(), true);
        let noise_ids: Vec<_> = noise
            .iter()
            .map(|row| g.leaf(TensorOf::new(vec![1, d], row.clone()).unwrap(), false))
            .collect();
        let z = relaxed_topk_graph(&mut g, lp, &noise_ids, 0.7).unwrap();
        let got = g.value(z).unwrap().data().to_vec();
        for (a, b) in got.iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
