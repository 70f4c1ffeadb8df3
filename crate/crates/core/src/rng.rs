//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 generators, which produce the same
//! sequence on every platform. Gaussian draws use `rand_distr::StandardNormal`
//! (ziggurat), so emission noise is reproducible from a seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
