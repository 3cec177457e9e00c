//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from the run seed plus a tuple of integer tags (epoch, step,
//! example index, ...). Tags are folded in with the SplitMix64 finalizer, so
//! two call sites with different tags get statistically independent streams
//! and any single stream can be regenerated without replaying the others.
//!
//! Gaussian variates use the basic Box–Muller transform, one output per pair
//! of uniforms (the sine branch is discarded), so the number of uniforms
//! consumed per normal draw is always exactly two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Tags identifying the purpose of a stream. Kept as constants so that
/// call sites never collide by accident.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PHI_NOISE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const TRAIN_ORDER: u64 = 4;
    pub const VAL_ORDER: u64 = 5;
    pub const EXPLORE: u64 = 6;
    pub const DATA: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const MEMBER: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a root seed and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tags))
}

/// Uniform in the open interval (0, 1).
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard normal variate via Box–Muller.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = open01(rng);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    mean + std * standard_normal(rng)
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// A shuffled permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}
