//! Deterministic RNG stream derivation.
//!
//! Every randomized phase of a run (model init, task generation, partition
//! draws, per-client batch shuffling, ...) pulls from its own ChaCha stream
//! derived from the experiment seed. Streams are independent of each other
//! and of execution order, so concurrent clients and skipped phases never
//! perturb another phase's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Phase labels for stream derivation. The numeric ids are part of the
/// reproducibility contract; do not reorder.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    ModelInit,
    TaskGen,
    Partition { task: usize },
    ClientTrain { task: usize, client: usize },
    TaskReset { task: usize },
    GammaPass,
    GammaTrain { task: usize },
    Oracle { trial: u64 },
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::ModelInit => 1,
            Stream::TaskGen => 2,
            Stream::Partition { task } => 0x1000 + task as u64,
            Stream::ClientTrain { task, client } => {
                0x10_0000 + (task as u64) * 0x1000 + client as u64
            }
            Stream::TaskReset { task } => 0x2000 + task as u64,
            Stream::GammaPass => 3,
            Stream::GammaTrain { task } => 0x3000 + task as u64,
            Stream::Oracle { trial } => 0x8000_0000 + trial,
        }
    }
}

/// Derive the RNG for a phase from the experiment seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
