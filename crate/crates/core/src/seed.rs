//! Named sub-seeds so every random stage of a run can be replayed from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent seed for the stage called `tag`.
pub fn derive(root: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finaliser over the combination.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

/// Same as [`derive`] with an extra integer index (fold, region, ...).
pub fn derive_indexed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix(derive(root, tag) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
