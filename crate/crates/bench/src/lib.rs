//! Shared inputs for the benchmarks. Everything is seeded so runs compare
//! like with like.

use specfuse_core::pipeline::{self, ModelParams};
use specfuse_core::rng::XorShift64Star;
use specfuse_core::synth::{self, SynthConfig, SynthPair};
use specfuse_core::{Config, FeatureMap};

/// Uniform noise in `[-1, 1)`.
pub fn random_map(height: usize, width: usize, channels: usize, seed: u64) -> FeatureMap {
    let mut rng = XorShift64Star::new(seed);
    FeatureMap::from_fn(height, width, channels, |_, _, _| rng.uniform(-1.0, 1.0) as f32)
}

pub fn random_patch(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = XorShift64Star::new(seed);
    (0..size * size).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// A noisy synthetic pair with a 2 px shift.
pub fn pair(height: usize, width: usize) -> SynthPair {
    let cfg = SynthConfig { height, width, noise_sigma: 0.02, ..SynthConfig::default() };
    synth::generate_pair(&cfg).expect("valid benchmark config")
}

pub fn model(config: &Config) -> ModelParams {
    pipeline::default_params(config, 0).expect("default parameters")
}
