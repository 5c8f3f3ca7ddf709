//! Seeded random streams. Every random decision in a run derives from one
//! master seed through named substreams so that, for example, turning
//! tripwires off does not perturb the allocator's tag sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub const ALLOCATOR_STREAM: &str = "allocator";
pub const SAMPLER_STREAM: &str = "sampler";
pub const GENERATOR_STREAM: &str = "generator";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed of the named substream of `seed`.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name)))
}

/// Seed for the `index`-th independent trial under a master seed.
pub fn trial_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

pub fn substream(seed: u64, name: &str) -> SimRng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}
