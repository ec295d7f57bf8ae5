//! Counter-based noise generation.
//!
//! Every random tensor is keyed by `(seed, stream)`: a ChaCha8 generator is
//! seeded from `seed` and positioned on `stream`, so a draw never depends on
//! how many values were consumed elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Named stream families. The numeric key is what positions the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Initial sampling noise `x_T`.
    InitialNoise,
    /// Fresh noise injected by stochastic sampler steps.
    SamplerStep(u64),
    /// Parameter initialization.
    Init,
    /// Per-step training randomness (batch choice, timesteps, noise, flips).
    TrainStep(u64),
    /// Free-form use by tests and tools.
    Custom(u64),
}

impl Stream {
    fn key(self) -> u64 {
        match self {
            Stream::InitialNoise => 1,
            Stream::Init => 2,
            Stream::SamplerStep(i) => (1 << 40) | i,
            Stream::TrainStep(i) => (2 << 40) | i,
            Stream::Custom(i) => (3 << 40) | i,
        }
    }
}

pub fn generator(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.key());
    rng
}

/// Standard normal tensor drawn from `(seed, stream)`.
pub fn normal_tensor(seed: u64, stream: Stream, shape: &[usize]) -> Tensor {
    let mut rng = generator(seed, stream);
    normal_from(&mut rng, shape)
}

pub fn normal_from(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}
