//! Named RNG substreams.
//!
//! One master seed drives the whole simulation; each subsystem draws from
//! its own ChaCha stream so that adding draws in one subsystem does not
//! perturb any other. Same seed -> same run, always.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers, one per randomness consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Alice's basis/bit choices (random-access by clock index).
    AlicePrep = 0,
    /// Bob's measurement-basis choices.
    BobBasis = 1,
    /// Signal detector APD0.
    Apd0 = 2,
    /// Signal detector APD1.
    Apd1 = 3,
    /// Reference detector APD2.
    Apd2 = 4,
    /// Channel phase/polarization drift.
    Channel = 5,
}

/// Deterministic RNG for `(seed, stream)`.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
