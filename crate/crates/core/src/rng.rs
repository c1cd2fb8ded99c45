//! Named random streams derived from one root seed.
//!
//! Every stage draws from its own stream so that re-running a single stage
//! in isolation reproduces the same draws as a full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed for a named stream, optionally indexed (iteration, draw, ...).
    pub fn seed(&self, stream: &str, path: &[u64]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update((stream.len() as u64).to_le_bytes());
        h.update(stream.as_bytes());
        for p in path {
            h.update(p.to_le_bytes());
        }
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn stream(&self, stream: &str, path: &[u64]) -> StageRng {
        StageRng::seed_from_u64(self.seed(stream, path))
    }
}

pub fn rng_from_seed(seed: u64) -> StageRng {
    StageRng::seed_from_u64(seed)
}
