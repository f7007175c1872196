//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed
//! by the run seed plus a path of stream tags, so parallel and serial
//! execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub mod stream {
    pub const DIRECTION: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const HELDOUT_DATA: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const ROLLOUT: u64 = 6;
    pub const INIT: u64 = 7;
}

pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = derive_rng(7, &[stream::ROLLOUT, 3, 4]).random();
        let b: u64 = derive_rng(7, &[stream::ROLLOUT, 3, 4]).random();
        let c: u64 = derive_rng(7, &[stream::ROLLOUT, 4, 3]).random();
        let d: u64 = derive_rng(8, &[stream::ROLLOUT, 3, 4]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
