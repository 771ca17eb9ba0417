//! Seeded random streams.
//!
//! All randomness derives from one 64-bit root seed. A stream is identified by
//! `(root, purpose tag, index)`: the root seed keys a ChaCha8 generator and the
//! tag/index pair selects its 64-bit stream id, so streams are independent and
//! can be created on any worker in any order without coordination.
//!
//! stream id = splitmix64(fnv1a64(tag) ^ splitmix64(index))

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(root: u64, tag: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(splitmix64(fnv1a64(tag) ^ splitmix64(index)));
    rng
}

/// Derives a child root seed, for nesting (e.g. one seed per sweep setting).
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a64(tag) ^ splitmix64(index)))
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
