//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`StreamRng`] derived from a
//! single root seed plus a stream name (`"data"`, `"noise"`, `"init"`, ...)
//! and an index, so that each component is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Independent stream `name[index]` of the root `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut state = seed ^ fnv1a(name).rotate_left(17) ^ index.wrapping_mul(0xA24B_AED4_963E_E407);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

pub fn standard_normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
