//! Deterministic seed derivation.
//!
//! Every stochastic stage (data synthesis, weight init, training shuffles,
//! per-voter noise draws) owns a ChaCha8 stream whose seed is derived from the
//! run seed with SplitMix64. Child seeds depend only on (seed, index), never
//! on execution order, so results are identical regardless of thread count.

/// `index`-th output of the SplitMix64 sequence seeded at `seed`.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the noise stream of one (example, voter) pair.
pub fn voter_stream_seed(base_seed: u64, example_index: u64, voter_index: u64) -> u64 {
    splitmix64(splitmix64(base_seed, example_index), voter_index)
}
