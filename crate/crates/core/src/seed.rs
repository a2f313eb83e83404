//! Sub-seed derivation. Every random stream in the crate is keyed by
//! `(master seed, stream name, index)`:
//!
//! `derive_seed(m, s, i) = splitmix64(splitmix64(m ^ fnv1a(s)) ^ i)`
//!
//! Streams used: `scene`/image_id, `questions`/image_id, `detection`/image_id,
//! `spatial`/image_id, `projection`/0, `split`/0, `init`/0, `shuffle`/epoch,
//! `dropout`/step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(stream)) ^ index)
}

pub fn rng_for(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
