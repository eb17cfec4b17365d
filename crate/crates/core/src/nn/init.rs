use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};

/// Seeded parameter initialiser: uniform in `±sqrt(1 / fan_in)`.
#[derive(Clone, Debug)]
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }
}
