//! Seeded random streams.
//!
//! Every stochastic computation derives its generator from a master seed and
//! a path of integer keys (replication index, draw index, purpose tag), so
//! results never depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for sub-streams.
pub mod tag {
    pub const DGP: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const NFACTORS: u64 = 3;
    pub const NUISANCE: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a key path into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
