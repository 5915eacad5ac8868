//! Deterministic randomness shared by every stochastic operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A seeded random stream with an explicit draw counter.
///
/// Identical `(seed, call sequence)` pairs yield identical draws on every
/// platform. Parallel workers get independent streams via [`RandomStream::derive`],
/// keeping merged results independent of worker count.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    position: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for worker `index` of a job seeded with `seed`.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index.wrapping_add(1));
        Self {
            seed,
            position: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// One uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.position += 1;
        self.rng.gen::<f64>()
    }

    /// One uniform draw in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let u = self.next_f64();
        ((u * n as f64) as usize).min(n - 1)
    }
}
