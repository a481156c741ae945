//! Deterministic random-number streams.
//!
//! Every stochastic stage derives its generator from a root seed and a small
//! tag path (stage tag, replication index, group index, ...) through a
//! SplitMix64 mix. Streams are therefore independent of scheduling: a
//! bootstrap replicate or a simulated group draws the same numbers whether it
//! runs first, last, or on another thread.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stage tags. Distinct constants keep streams for different purposes
/// disjoint even when their numeric indices collide.
pub mod tag {
    pub const PANEL: u64 = 0x01;
    pub const BOOTSTRAP: u64 = 0x02;
    pub const KMEANS: u64 = 0x03;
    pub const MONTE_CARLO: u64 = 0x04;
    pub const OUTCOMES: u64 = 0x05;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the stream key for a seed and tag path.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0x6A09_E667_F3BC_C908);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// A seeded generator for the given tag path.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_key(seed, tags))
}
