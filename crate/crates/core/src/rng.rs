//! Seeded random streams. Every stochastic component draws from a stream
//! derived from `(seed, stream)` so runs are reproducible regardless of
//! evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for a two-level index such as `(epoch, example)`.
pub fn stream2(seed: u64, a: u64, b: u64) -> StreamRng {
    stream(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15), b)
}
