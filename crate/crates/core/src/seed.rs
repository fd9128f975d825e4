//! Per-stage seed derivation: `splitmix64(seed ^ fnv1a(stage))`.

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named stage, so stages can be rerun in isolation.
pub fn derive(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stage))
}

/// Seed for the `index`-th member of a family (repetitions, trees).
pub fn derive_indexed(seed: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive(seed, stage) ^ splitmix64(index))
}
