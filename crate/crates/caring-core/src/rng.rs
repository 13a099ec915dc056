//! Seed derivation and RNG construction.
//!
//! All randomness in the crate flows from explicit 64-bit master seeds.
//! Sub-streams (per trajectory, per epoch, per model component) are derived
//! with a splitmix64 step over (master, index) so that work can be split
//! across threads without changing any drawn value.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 output for the given state.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a master seed and a stream index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_across_indices() {
        let a = derive_seed(770, 0);
        let b = derive_seed(770, 1);
        let c = derive_seed(771, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derivation_is_stable() {
        // Frozen values: the dataset format depends on this derivation.
        assert_eq!(derive_seed(770, 0), derive_seed(770, 0));
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
