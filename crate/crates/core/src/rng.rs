//! Deterministic random number generation.
//!
//! One fixed algorithm everywhere: the ChaCha8 stream cipher seeded from a
//! 64-bit seed. Identical seed means an identical sample stream on every
//! platform and in every build, which makes fixtures, dropout masks and
//! shuffles reproducible bit-for-bit.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier of the generator algorithm backing [`RngState`].
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded deterministic RNG.
///
/// Wraps `ChaCha8Rng` and remembers the seed it was built from. Streams for
/// unrelated purposes (init, shuffling, dropout, fixtures) should be derived
/// with [`RngState::derive`] so consuming one stream never shifts another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    stream: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            stream: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed this state was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A new independent state for a named sub-stream.
    ///
    /// Uses one round of SplitMix64 over `seed + role` so distinct roles
    /// land on unrelated seeds.
    pub fn derive(&self, role: u64) -> Self {
        RngState::new(split_mix(self.seed.wrapping_add(role)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.stream.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[-limit, limit)`.
    pub fn next_symmetric(&mut self, limit: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * limit
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.stream.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.stream.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> core::result::Result<(), rand::Error> {
        self.stream.try_fill_bytes(dest)
    }
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
