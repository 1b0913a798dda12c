//! Counter-based random numbers.
//!
//! Values are pure functions of their keys, so dropout masks and other
//! per-step draws can be regenerated exactly when a run is replayed or
//! resumed from a checkpoint.

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an ordered list of words into one 64-bit key.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| mix64(acc ^ mix64(w)))
}

/// FNV-1a over bytes; used to turn names into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Uniform draw in [0, 1) keyed by `(key, counter)`.
#[inline]
pub fn uniform(key: u64, counter: u64) -> f64 {
    let bits = mix64(key ^ mix64(counter)) >> 11;
    bits as f64 * (1.0 / (1u64 << 53) as f64)
}
