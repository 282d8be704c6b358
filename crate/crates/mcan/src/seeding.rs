//! Labeled sub-seed derivation.
//!
//! Every stage of the pipeline draws its randomness from a sub-seed derived
//! from the user's single seed and a fixed label, so adding or reordering a
//! stage never perturbs the random streams of the others.

/// Derives a deterministic sub-seed from a root seed and a stage label.
///
/// FNV-1a over the label, then a splitmix64 finalizer over the combination.
/// Stable across platforms and releases.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
