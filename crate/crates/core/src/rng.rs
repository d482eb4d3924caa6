//! Seeded random number generation.
//!
//! Every stochastic routine takes an explicit generator. Independent streams
//! (replications, prior draws, particle runs) are derived from a root seed
//! with a counter so that results never depend on scheduling.

use rand::SeedableRng;

/// Generator used throughout the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `root ^ stream`-style mixes; gives well
/// separated seeds for consecutive counters.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
