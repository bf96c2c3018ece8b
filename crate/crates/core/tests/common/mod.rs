#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macow::io::synth::gaussian_mixture;
use macow::io::Dataset;
use macow::model::ModelConfig;

pub const N_BITS: u32 = 5;

/// Small two-level model on 8x8x1 images.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        depths: vec![vec![1, 1], vec![1]],
        hidden_channels: 16,
        image: (8, 8, 1),
        n_bits: N_BITS,
        ..ModelConfig::default()
    }
}

/// Discretized two-component mixture: `(train, test)`.
pub fn mixture_data(n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gaussian_mixture(n_train, 8, 8, N_BITS, 1.5, &mut rng).unwrap();
    let test = gaussian_mixture(n_test, 8, 8, N_BITS, 1.5, &mut rng).unwrap();
    (
        Dataset::from_u8(train, N_BITS).unwrap(),
        Dataset::from_u8(test, N_BITS).unwrap(),
    )
}
