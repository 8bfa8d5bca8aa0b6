use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Deterministic seeded randomness.
///
/// Backed by a counter-based stream cipher generator, so the same seed and
/// call sequence produce identical output on every platform, and concurrent
/// sampling chains can take disjoint substreams via [`Rng::substream`].
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from (seed, index). Streams with
    /// distinct indices never overlap.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index.wrapping_add(1));
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A tensor of i.i.d. standard normal draws.
    pub fn gaussian(&mut self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| self.inner.sample(StandardNormal))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }
}
