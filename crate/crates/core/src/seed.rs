/// SplitMix64 finalizer over `seed ^ stream`, used to derive independent
/// RNG streams from one global seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rounds half away from zero, as used for every patch count.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}
