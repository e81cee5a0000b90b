//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 stream keyed by the
//! user seed and selected by a stream id derived from a purpose tag and the
//! item indices. Draws therefore never depend on thread scheduling, and the
//! `r`-th noise sample is the same whatever the total sample count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Recorded in every report so runs can be traced back to the generator.
pub const PRNG_ID: &str = "chacha20/rand_chacha-0.9/seed_from_u64+splitmix64-stream";

pub(crate) mod tags {
    pub const ROOT: u64 = 1;
    pub const BASELINE: u64 = 2;
    pub const PERTURB: u64 = 3;
    pub const DERIVE: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_id(tag: u64, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix64(tag), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

/// Independent generator for `(seed, tag, indices)`.
pub fn substream(seed: u64, tag: u64, indices: &[u64]) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(tag, indices));
    rng
}

/// Derives a child seed, used to give each (input, method) pair of a run its
/// own seed.
pub fn derive_seed(seed: u64, indices: &[u64]) -> u64 {
    substream(seed, tags::DERIVE, indices).random()
}

pub fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw on `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
