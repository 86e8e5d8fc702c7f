//! Counter-keyed random streams.
//!
//! Every random draw in a simulation is addressed by `(seed, replication,
//! purpose, index)`. Each address maps to its own ChaCha8 key, so the value
//! of a draw never depends on how replications are scheduled over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps unit draws and auxiliary draws apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Unit = 1,
    Folds = 2,
    OracleDesign = 3,
    Auxiliary = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    replication: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey {
            seed,
            replication: 0,
        }
    }

    pub fn replication(self, replication: u64) -> Self {
        StreamKey {
            replication,
            ..self
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replication_id(&self) -> u64 {
        self.replication
    }

    /// Stream for the `t`-th sampled unit.
    pub fn unit(&self, t: u64) -> ChaCha8Rng {
        self.stream(Purpose::Unit, t)
    }

    pub fn stream(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replication.to_le_bytes());
        key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
        key[24..].copy_from_slice(&index.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}
