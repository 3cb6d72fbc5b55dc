//! Seeded RNG substreams.
//!
//! Every random draw in the framework comes from a ChaCha stream derived
//! from the run seed plus a list of integer tags (purpose, epoch, episode
//! index, ...). Derivation is pure, so any unit of work can be replayed or
//! executed on any worker without consuming a shared stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Keeping them distinct means e.g. evaluation episodes
/// never collide with training episodes under the same run seed.
pub mod tag {
    pub const CENTER: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPISODE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const VAL: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const JITTER: u64 = 8;
    pub const HEAD: u64 = 9;
}

/// splitmix64 finalizer; good avalanche, cheap, stable.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent stream from `(seed, tags...)`.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(s)
}
