//! Named random streams derived from one top-level seed.
//!
//! Every consumer asks for a stream by name plus integer coordinates
//! (fold, step, sample index, ...). The stream seed is a SHA-256 digest of
//! those values, so streams are independent of each other and of the order
//! in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, name: &str, coords: &[u64]) -> StreamRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for c in coords {
            h.update(c.to_le_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// A child family, e.g. one per cross-validation fold.
    pub fn child(&self, name: &str, coords: &[u64]) -> Streams {
        use rand::RngCore;
        Streams::new(self.rng(name, coords).next_u64())
    }
}
