//! Seedable, splittable counter-based random stream.
//!
//! Every stream is a ChaCha8 keystream identified by `(seed, stream)`.
//! [`DgmRng::split`] derives a child stream from the parent's identity only,
//! never from how many values the parent has drawn, so the same tag always
//! yields the same child.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Offset that keeps open-interval uniforms away from 0 and 1.
pub const UNIFORM_EPS: f64 = 1e-12;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct DgmRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl DgmRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream labelled by `tag`.
    pub fn split(&self, tag: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform strictly inside `(0, 1)`: `(u + ε) / (1 + 2ε)`.
    pub fn uniform_open(&mut self) -> f64 {
        (self.uniform() + UNIFORM_EPS) / (1.0 + 2.0 * UNIFORM_EPS)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for DgmRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_independent_of_parent_position() {
        let a = DgmRng::new(7);
        let mut b = DgmRng::new(7);
        for _ in 0..10 {
            b.uniform();
        }
        let (mut ca, mut cb) = (a.split(3), b.split(3));
        for _ in 0..5 {
            assert_eq!(ca.next_u64(), cb.next_u64());
        }
        let mut other = a.split(4);
        assert_ne!(a.split(3).next_u64(), other.next_u64());
    }

    #[test]
    fn open_uniform_never_hits_bounds() {
        let mut r = DgmRng::new(1);
        for _ in 0..10_000 {
            let q = r.uniform_open();
            assert!(q > 0.0 && q < 1.0);
        }
        assert!(UNIFORM_EPS / (1.0 + 2.0 * UNIFORM_EPS) > 0.0);
        assert!((1.0 + UNIFORM_EPS) / (1.0 + 2.0 * UNIFORM_EPS) < 1.0);
    }
}
