//! Seeded random sources.
//!
//! Every randomized step in the crate draws from a xoshiro256++ generator
//! seeded through SplitMix64. Index draws go through [`below`], which samples
//! a `u64` regardless of pointer width, so a seed produces the same stream on
//! every platform. The generator is part of the model-file contract: two runs
//! with equal seeds must initialize bit-identical tensors.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream id (epoch, worker, split, ...) into an
/// independent seed. SplitMix64 finalizer.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
#[inline]
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform index in `0..n`. `n` must be positive.
#[inline]
pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.gen_range(0..n as u64) as usize
}

#[inline]
pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    unit(rng) < p
}

/// Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
