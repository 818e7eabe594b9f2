//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed from a base seed plus a path of stream labels, so results do not
//! depend on the order in which independent units are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a base seed with a sequence of stream labels into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Stream labels, kept distinct so unrelated consumers never share a stream.
pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_SYNTH: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;
pub(crate) const STREAM_TRAIN: u64 = 4;
pub(crate) const STREAM_LOC_EXTRACT: u64 = 5;
pub(crate) const STREAM_SPATEM: u64 = 6;
pub(crate) const STREAM_SHADOW: u64 = 7;
pub(crate) const STREAM_CARRIER: u64 = 8;
pub(crate) const STREAM_DP_NOISE: u64 = 9;
pub(crate) const STREAM_GEO: u64 = 10;
pub(crate) const STREAM_PROTECT: u64 = 11;
pub(crate) const STREAM_TARGETS: u64 = 12;
