//! Seeded random streams.
//!
//! Every run derives its generators from one root seed. A stream is the
//! ChaCha8 generator keyed by the root seed with its 64-bit stream counter
//! set to `(purpose << 48) | index`, so replication `i` of a given purpose
//! is independent of all others and reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Purpose {
    /// Hidden-state transitions of the simulated environment.
    Environment = 1,
    /// Posterior sampling inside the learner.
    Learner = 2,
    /// Draws of the true parameter from the prior.
    Prior = 3,
    /// Simulations that estimate average rewards.
    Evaluation = 4,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    assert!(index < 1 << 48, "stream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | index);
    rng
}
