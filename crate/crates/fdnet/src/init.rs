//! Seeded random number plumbing and Xavier parameter initialization.
//!
//! Every random draw in the crate flows through a ChaCha stream derived from
//! a user seed, so identical seeds give bitwise-identical parameters, batch
//! orders and sampling masks.

use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// splitmix64 finalizer; decorrelates derived stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for (seed, stream id) pairs, e.g. per-iteration masks.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream)))
}

/// Xavier-normal (gain 1) init for a rank-4 kernel: `std = sqrt(2/(fan_in+fan_out))`
/// with `fan_in = shape[1]*kh*kw`, `fan_out = shape[0]*kh*kw`. Samples are drawn
/// in f64 and cast, so f32 and f64 models share the same stream.
pub fn xavier_normal<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<E> {
    assert_eq!(shape.len(), 4, "xavier init expects a conv kernel shape");
    let receptive: usize = shape[2] * shape[3];
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is positive");
    Tensor::from_fn(shape, |_| E::from_f64(normal.sample(rng)))
}
