//! Seeded random streams.
//!
//! Every random draw in the library comes from a [`ChaCha8Rng`] built from the
//! run seed and a named [`Stream`]. Separate streams keep, say, the batching
//! order unchanged when the initialization code starts drawing more numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Gumbel,
    Batching,
    Episode,
    Bench,
    /// Code sampling at evaluation time.
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Gumbel => 3,
            Stream::Batching => 4,
            Stream::Episode => 5,
            Stream::Bench => 6,
            Stream::Eval => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
