//! Seed derivation and Gaussian noise images.
//!
//! Every stochastic operation takes an explicit `u64` seed; sub-streams are
//! derived with a splitmix64 mix so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::Image;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for sub-stream `tag` of `base`.
#[inline]
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix64(mix64(base) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Image of i.i.d. standard normal samples.
pub fn gaussian_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = rng_from_seed(seed);
    let data = (0..width * height)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Image::from_vec_unchecked(width, height, data)
}
