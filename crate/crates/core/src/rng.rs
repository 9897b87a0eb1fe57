//! Hierarchical seed derivation.
//!
//! Every random stream in a run is derived from one master seed and a path of
//! tags, e.g. `(trial, agent, iteration, Purpose::Sampling)`. Streams never
//! share state, so the order in which agents or trials execute cannot change
//! any drawn value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Capture = 1,
    Sampling = 2,
    Network = 3,
    Decoder = 4,
    Agent = 5,
    Test = 99,
}

/// Derive an independent generator from `master` and a tag path.
pub fn derive(master: u64, tags: &[u64]) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"consensus-mapping/rng/v1");
    hasher.update(master.to_le_bytes());
    for tag in tags {
        hasher.update(tag.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Stream for one `(trial, agent, iteration)` cell and purpose.
pub fn stream(master: u64, trial: usize, agent: usize, iteration: usize, purpose: Purpose) -> Rng {
    derive(
        master,
        &[trial as u64, agent as u64, iteration as u64, purpose as u64],
    )
}
