//! Seeded randomness.
//!
//! All streams are ChaCha8 (a counter-based generator with a published
//! algorithm), keyed by mixing a base seed with a path of integers through
//! SplitMix64. Streams depend only on `(seed, path)`, never on call order
//! elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and a path of stream identifiers.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags so unrelated consumers of one seed never share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const VIEWS: u64 = 2;
    pub const EPOCH: u64 = 3;
    pub const SIGREG: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const BENCH: u64 = 8;
}
