//! Shared fixtures for the criterion benches.

use mcref_core::data::{generate_synthetic, SyntheticSpec};
use mcref_core::nn::LayerSpec;
use mcref_core::{Dataset, Network, NetworkConfig};

/// Two-class Gaussian data with the given size and dimension.
pub fn dataset(n: usize, dim: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec::two_class(n, dim, 0.1, 7).unwrap()).unwrap()
}

/// A two-hidden-layer network with dropout on.
pub fn network(dim: usize, width: usize) -> Network {
    let cfg = NetworkConfig::new(dim, 2, vec![LayerSpec::relu(width), LayerSpec::relu(width)])
        .with_dropout(0.5, 0.4)
        .with_seed(7);
    Network::new(cfg).unwrap()
}
