//! Seeded random streams. Every randomized step in the crate draws from an
//! [`RngStream`], so identical seeds reproduce identical artifacts.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// ChaCha20 stream keyed by a 64-bit seed. Child streams share the key and
/// select a distinct ChaCha stream id, so `(seed, index)` pairs never overlap.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `(seed, index)`.
    pub fn child(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(index);
        RngStream { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
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

/// Draws `keep` distinct indices from `0..total` without replacement, in
/// sampled order (partial Fisher-Yates).
pub fn choose_channel_indices(
    rng: &mut RngStream,
    total: usize,
    keep: usize,
) -> Result<Vec<usize>> {
    if keep > total {
        return Err(Error::arg(format!(
            "cannot keep {keep} channels out of {total}"
        )));
    }
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..keep {
        let j = rng.random_range(i..total);
        pool.swap(i, j);
    }
    pool.truncate(keep);
    Ok(pool)
}
