//! Seeded, splittable random streams.
//!
//! Each stream is a ChaCha8 keystream keyed by the 64-bit seed, with a 64-bit
//! stream selector. Normal deviates come from the ziggurat sampler in
//! `rand_distr`. Both are specified to produce identical values on every
//! platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Identifier recorded alongside saved runs.
pub const RNG_ALGORITHM: &str = "chacha8/ziggurat-normal";

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> RngStream {
        RngStream::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> RngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent child stream. The child depends only on this stream's
    /// identity and `label`, not on how far this stream has advanced.
    pub fn fork(&self, label: u64) -> RngStream {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        RngStream::with_stream(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
