//! Deterministic seed derivation. Every random stream in the crate is keyed by
//! `(base seed, purpose, index)` so streams never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(base);
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ splitmix(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng(derive(base, tag, index))
}
