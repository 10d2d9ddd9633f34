//! Criterion benchmarks for the training and inference hot paths.
//! The crate itself only hosts shared fixture helpers.

use dfwd_core::profile::synthetic_rows;
use dfwd_core::{build_network, data, parse_arch, Dataset, EmbedMode, Network, Strategy, Tensor};

pub const CLASSES: usize = 9;
pub const IMAGE_SHAPE: [usize; 3] = [1, 8, 8];

/// Standardized synthetic classification set (8×8 single-channel patches).
pub fn fixture_data(rows: usize, seed: u64) -> Dataset<f32> {
    let mut ds = data::synthetic(rows, rows / 4, CLASSES, seed);
    data::standardize(&mut ds).expect("standardize fixture");
    ds
}

/// A three-layer MLP wired for the given strategy.
pub fn fixture_mlp(width: usize, strategy: &Strategy, seed: u64) -> Network<f32> {
    let specs = parse_arch(&format!("mlp({width},{width},{width})")).expect("arch literal");
    build_network(&specs, &IMAGE_SHAPE, CLASSES, strategy, EmbedMode::LearnableChannel, seed)
        .expect("fixture network")
}

/// Reproducible evaluation rows shaped like the fixture images.
pub fn fixture_rows(rows: usize, seed: u64) -> Tensor<f32> {
    synthetic_rows(rows, &IMAGE_SHAPE, seed)
}
