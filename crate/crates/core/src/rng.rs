//! Deterministic random streams.
//!
//! Every experiment draws from [`ChaCha8Rng`], a counter-based generator whose
//! state is fully determined by `(seed, stream)`. Parallel workers get their own
//! stream index so results do not depend on scheduling.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Generator for the root stream of `seed`.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for sub-stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for training run `index` of `seed`.
///
/// Training streams count down from `u64::MAX`, so they never coincide with
/// the per-run evaluation streams `0, 1, 2, ...` of the same seed.
pub fn training_stream(seed: u64, index: u64) -> ChaCha8Rng {
    stream(seed, u64::MAX - index)
}
