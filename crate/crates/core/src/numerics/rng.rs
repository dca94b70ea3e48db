//! Seeded random streams.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded from a `u64`
//! through `SeedableRng::seed_from_u64`, which is portable and reproducible
//! across platforms. Named sub-streams are derived by hashing the stream name
//! (FNV-1a) into the parent seed and mixing with SplitMix64, so that the data,
//! init, dropout and routing-noise streams never share state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Real;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream named `name`, a pure function of this stream's seed.
    pub fn derive(&self, name: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }

    /// Independent stream for the `index`-th use of `name` (e.g. one per step).
    pub fn derive_indexed(&self, name: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            splitmix64(self.seed ^ fnv1a(name.as_bytes())) ^ index,
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via multiply-shift. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal sample (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec<F: Real>(&mut self, n: usize, std: f64) -> Vec<F> {
        (0..n).map(|_| F::from_f64_lossy(self.normal() * std)).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn stream_is_pinned() {
        // Freezes the generator choice; any change here breaks run reproducibility.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(first, again.next_u64());
    }

    #[test]
    fn derived_streams_differ() {
        let root = Rng::new(7);
        let mut a = root.derive("data");
        let mut b = root.derive("init");
        let mut c = root.derive_indexed("dropout", 1);
        let mut d = root.derive_indexed("dropout", 2);
        let xs = [a.next_u64(), b.next_u64(), c.next_u64(), d.next_u64()];
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                assert_ne!(xs[i], xs[j]);
            }
        }
        assert_eq!(root.derive("data").next_u64(), xs[0]);
    }

    #[test]
    fn uniform_and_below_in_range() {
        let mut r = Rng::new(1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
