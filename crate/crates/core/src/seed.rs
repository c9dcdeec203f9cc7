//! Deterministic seed derivation so that every random draw depends only on
//! the root seed and the draw's identity, never on scheduling.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `root` with each of `parts` in order.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
