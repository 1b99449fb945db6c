//! Seeded, stream-split randomness. Every consumer derives its own ChaCha
//! stream from the root seed plus a purpose tag and indices, so parallel
//! workers never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    TransE = 2,
    Shuffle = 3,
    Noise = 4,
    Sampling = 5,
    TransEShuffle = 6,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, a: u64, b: u64) -> u64 {
    mix(mix(mix(root ^ mix(stream as u64)) ^ a) ^ b.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn stream_rng(root: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, a, b))
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
