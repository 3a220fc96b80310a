use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a labelled stream, e.g. `(seed, [SCENE, id])`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

// stream tags
pub const SCENE: u64 = 1;
pub const SPLIT: u64 = 2;
pub const AUGMENT: u64 = 3;
pub const INIT: u64 = 4;
pub const SAMPLING: u64 = 5;
pub const JITTER: u64 = 6;
pub const BATCH: u64 = 7;
pub const TEST: u64 = 8;
