//! Seedable RNG plumbing. Every stochastic operation in the crate takes an
//! explicit generator; there is no ambient randomness. Stage seeds derive
//! from a master seed through stable labels so that any single stage is
//! independently reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derived seed = first 8 bytes of SHA-256(master_le || label).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        let a = derive_seed(42, "datagen");
        assert_eq!(a, derive_seed(42, "datagen"));
        assert_ne!(a, derive_seed(42, "splits"));
        assert_ne!(a, derive_seed(43, "datagen"));
    }
}
