//! Seed derivation so that independent jobs get independent, order-free streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a label. Depends only on the pair,
/// never on the order in which children are requested.
pub fn derive(master: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix64(master), |acc, b| splitmix64(acc ^ u64::from(b)))
}

/// Same as [`derive`] with an integer label.
pub fn derive_index(master: u64, label: &str, index: usize) -> u64 {
    splitmix64(derive(master, label) ^ index as u64)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_separates_labels_and_is_stable() {
        assert_eq!(derive(7, "resnet50"), derive(7, "resnet50"));
        assert_ne!(derive(7, "resnet50"), derive(7, "efficientnet_b0"));
        assert_ne!(derive(7, "x"), derive(8, "x"));
        assert_ne!(derive_index(1, "cluster", 0), derive_index(1, "cluster", 1));
    }
}
