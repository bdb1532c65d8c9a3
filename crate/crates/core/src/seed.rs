//! Deterministic seed derivation for nested Monte Carlo streams.
//!
//! Every repetition, scenario, and sub-draw receives its own seed computed
//! from a base seed and a stable index, so results do not depend on the
//! order in which repetitions execute.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mixes a base seed with a stream index into an independent child seed.
///
/// Uses two rounds of the splitmix64 finalizer over the pair, which is
/// enough to decorrelate adjacent indices and adjacent base seeds.
pub fn derive(base: u64, index: u64) -> u64 {
    let mut z = base ^ splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15));
    z = splitmix(z);
    splitmix(z)
}

/// Derives a seed from a base and a path of indices (cell, rep, draw, ...).
pub fn derive_path(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(base, |acc, &i| derive(acc, i))
}

/// Counter-based RNG used throughout the crate.
pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
