//! Derivation of independent sub-seeds from a run seed.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds `parts` into one seed; distinct part lists give unrelated streams.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags keep per-purpose seeds apart.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const EVAL_VALID: u64 = 2;
    pub const EVAL_TEST: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}
