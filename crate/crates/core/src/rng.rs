//! Counter-based Gaussian streams.
//!
//! A stream is a ChaCha8 keystream selected by `(seed, path_id)`; the
//! variates of step `k` sit at a fixed keystream offset when every step
//! draws the same count, so the noise of a path is a pure function of
//! `(seed, path_id, step_id)`. Normals come from the inverse CDF, which
//! keeps the map from bits to variates free of rejection loops.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc_inv;

#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    sign: f64,
}

impl NormalStream {
    pub fn new(seed: u64, path_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_id);
        NormalStream { rng, sign: 1.0 }
    }

    /// Positions the stream at `step_id` for a layout of `per_step` normals per step.
    pub fn at_step(seed: u64, path_id: u64, step_id: u64, per_step: usize) -> Self {
        let mut s = Self::new(seed, path_id);
        s.rng
            .set_word_pos(2 * step_id as u128 * per_step as u128);
        s
    }

    /// Negates every variate drawn from this stream (mirrored noise).
    pub fn mirrored(mut self, mirror: bool) -> Self {
        self.sign = if mirror { -1.0 } else { 1.0 };
        self
    }

    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        open_unit(self.rng.next_u64())
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.sign * inv_normal_cdf(self.next_uniform())
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_normal();
        }
    }
}

/// Maps 64 random bits to the open interval (0, 1).
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile.
#[inline]
pub fn inv_normal_cdf(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Derives a child seed from a master seed and a list of labels.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    for &l in labels {
        h = splitmix64(h ^ splitmix64(l.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
