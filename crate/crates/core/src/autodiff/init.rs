use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::scalar::Real;

/// Seeded generator used for every random draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Xavier/Glorot uniform: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<S: Real>(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| S::lit(rng.gen_range(-a..a))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}

pub fn uniform<S: Real>(rng: &mut SeededRng, shape: &[usize], a: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

pub fn normal<S: Real>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<S> {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Independent child seed for stream `stream` of `seed` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
