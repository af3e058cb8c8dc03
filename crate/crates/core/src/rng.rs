//! Deterministic random substreams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the experiment seed, the trial index and a named purpose, so components can
//! be varied independently and results do not depend on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Channel = 1,
    Training = 2,
    Noise = 3,
    Design = 4,
    DownlinkTraining = 5,
    DownlinkNoise = 6,
}

pub fn substream(seed: u64, trial: u64, stream: Stream) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream((trial << 8) | stream as u64);
    rng
}
