//! Seeded randomness.
//!
//! Every stochastic stage draws from ChaCha8 keyed by the run seed, with a
//! distinct stream number per stage. Streams are independent, so changing
//! how many values one stage consumes never shifts another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ParamInit = 1,
    Codebook = 2,
    Shuffle = 3,
    SyntheticFleet = 4,
    Test = 99,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
