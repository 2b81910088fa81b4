//! Deterministic seed derivation.

/// SplitMix64 finalizer applied to `base + (index + 1)·φ`; gives independent
/// streams for tiles, stages and epochs from one user seed.
pub fn derive(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
