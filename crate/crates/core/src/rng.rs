//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from one user seed plus
//! a fixed stream id, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_POINTS: u64 = 1;
pub const STREAM_FEATURES: u64 = 2;
pub const STREAM_PARAMS: u64 = 3;
pub const STREAM_CHECKS: u64 = 4;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child generator for the `index`-th repetition of a stream, e.g. the
/// `index`-th random trial of a check suite.
pub fn substream(seed: u64, stream_id: u64, index: u64) -> Rng {
    debug_assert!(stream_id < 1 << 32 && index < 1 << 32);
    stream(seed, (stream_id << 32) | (index + 1))
}
