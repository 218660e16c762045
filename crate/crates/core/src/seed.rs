//! Deterministic seed derivation.
//!
//! Every stochastic step draws from a `ChaCha8Rng` whose seed is a pure
//! function of the master seed and a stream label, so results never depend
//! on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `seed` for the given stream.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    rng(derive(seed, stream))
}

// Stream labels. Values are arbitrary but frozen: changing one changes every
// downstream result.
pub(crate) mod stream {
    pub const CROSSFIT: u64 = 1;
    pub const TRAIN_VAL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const LASSO_CV: u64 = 5;
    pub const DGP: u64 = 6;
    pub const OLS_SUBSET: u64 = 7;
    pub const DML: u64 = 8;
    pub const OUTCOME_NUISANCE: u64 = 9;
    pub const TREATMENT_NUISANCE: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_stream_sensitive() {
        assert_eq!(derive(7, 1), derive(7, 1));
        assert_ne!(derive(7, 1), derive(7, 2));
        assert_ne!(derive(7, 1), derive(8, 1));
    }
}
