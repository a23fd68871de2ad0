use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Standard-normal sampler for weight init in tests.
pub fn lcg_init(seed: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut g = lcg_init(seed);
    Tensor::from_fn(shape, |_| g())
}
