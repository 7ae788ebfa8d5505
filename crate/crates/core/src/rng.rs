//! Seeded random streams.
//!
//! Every stochastic routine takes an injected stream. Data-parallel loops
//! derive one independent substream per item from a single seed drawn off the
//! caller's stream, so results do not depend on the thread schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The stream type used throughout the crate.
pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `index` of the family keyed by `key`.
pub fn substream(key: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Draws a fresh key for a family of substreams.
pub fn fork_key<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}

