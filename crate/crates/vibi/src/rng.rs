//! Splittable deterministic random streams.
//!
//! A stream is identified by a 64-bit key; drawing never touches sibling or
//! child streams, and children are derived from the parent key and a tag
//! path only. Every sampled quantity in a run is therefore reproducible
//! from the run seed plus structural coordinates (epoch, batch, draw index)
//! regardless of evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain-separation tags for child streams. Keeping them in one place
/// avoids accidental key collisions between subsystems.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const MASK_NOISE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATA: u64 = 5;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic, splittable random stream.
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        let key = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
        RngStream {
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Derive an independent child stream. Only the parent's key and the tag
    /// enter the derivation, never the parent's draw position.
    pub fn child(&self, tag: u64) -> Self {
        let key = splitmix64(self.key ^ splitmix64(tag.wrapping_mul(0xa24b_aed4_963e_e407)));
        RngStream {
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Child addressed by a tag path, e.g. `[MASK_NOISE, epoch, batch, l, m]`.
    pub fn child_path(&self, path: &[u64]) -> Self {
        let mut s = RngStream {
            key: self.key,
            rng: ChaCha8Rng::seed_from_u64(self.key),
        };
        for &t in path {
            s = s.child(t);
        }
        s
    }

    /// Uniform draw in the open interval (0, 1). Draws landing exactly on
    /// the boundary are resampled, preserving the exact Gumbel law
    /// downstream.
    pub fn uniform_open01(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.gen(); // [0, 1)
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard Gumbel(0,1) draw, `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        crate::sampler::gumbel(self.uniform_open01()).expect("u in (0,1) by construction")
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    pub fn usize_below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}
