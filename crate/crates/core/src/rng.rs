//! Counter-based random streams.
//!
//! Every random tensor in an experiment is drawn from its own ChaCha8 stream,
//! keyed by the master seed and addressed by `(trial, layer, tensor)`. Results
//! therefore do not depend on the order in which trials are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Which tensor a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tensor {
    Inputs = 1,
    Weights = 2,
    Biases = 3,
    Teacher = 4,
    Probe = 5,
}

/// Returns the generator for one `(trial, layer, tensor)` triple.
pub fn stream(seed: u64, trial: u64, layer: u32, tensor: Tensor) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 32 bits of trial index, 24 of layer, 8 of tensor tag.
    let id = (trial << 32) | (u64::from(layer & 0x00ff_ffff) << 8) | tensor as u64;
    rng.set_stream(id);
    rng
}

/// Fills a vector with i.i.d. standard normal draws from one stream.
pub fn standard_normals(seed: u64, trial: u64, layer: u32, tensor: Tensor, len: usize) -> Vec<f64> {
    let mut rng = stream(seed, trial, layer, tensor);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}
