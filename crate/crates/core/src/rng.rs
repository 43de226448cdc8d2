//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator: a counter-based design with a 64-bit
//! seed and a 64-bit stream selector. A run seed plus a stream id fully
//! determines the sequence, so each trainer thread gets an independent stream
//! from `(seed, thread id)` without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids reserved for model initialisation.
pub const STREAM_USERS: u64 = 1;
pub const STREAM_ITEMS: u64 = 2;
pub const STREAM_AGGREGATOR: u64 = 3;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from `(seed, tag)` with the splitmix64 finaliser.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
