//! Seed derivation. Every random stream in a run is keyed by the global seed
//! plus a small tuple of integers (client id, round, purpose), so results do
//! not depend on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

// Stream purposes.
pub(crate) const INIT: u64 = 1;
pub(crate) const SELECT: u64 = 2;
pub(crate) const CLIENT: u64 = 3;
pub(crate) const PARTITION: u64 = 4;
pub(crate) const NOISE: u64 = 5;
pub(crate) const SYNTH: u64 = 6;
pub(crate) const EMBED: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, parts))
}
