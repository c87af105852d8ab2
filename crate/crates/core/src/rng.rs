//! Seeded random streams.
//!
//! Every random choice in the crate is drawn from a ChaCha20 generator keyed
//! by a user-supplied 64-bit seed. Independent consumers of the same seed use
//! distinct ChaCha stream ids, so e.g. the permutation order of a run and the
//! output noise added to it never share a keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type SeededRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Permutation = 0,
    OutputNoise = 1,
    IterationNoise = 2,
    Sampling = 3,
    Projection = 4,
    Split = 5,
    Synthetic = 6,
    Selection = 7,
    Oracle = 8,
}

pub fn seeded(seed: u64, stream: Stream) -> SeededRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
