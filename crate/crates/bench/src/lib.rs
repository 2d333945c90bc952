//! Shared fixtures for the benchmarks.

use lapformer_core::data::{generate_sample, DatasetManifest, SampleRecord};
use lapformer_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three `n×d` standard-normal token matrices.
pub fn qkv(n: usize, d: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| Tensor::randn(&[n, d], 1.0, &mut rng))
}

/// A handful of samples from the default texture generator.
pub fn texture_samples(n: usize) -> Vec<SampleRecord> {
    let m = DatasetManifest::default();
    (0..n as u64).map(|i| generate_sample(&m, i).expect("default manifest is valid")).collect()
}
