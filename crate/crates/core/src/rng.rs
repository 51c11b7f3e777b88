//! Seed plumbing. Every random draw in the crate comes from an explicitly
//! seeded generator created here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(tag, index)` under `master`; stable across platforms.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(master);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}
