//! Shared fixtures for the benchmarks.

use condensery::data::make_blobs;
use condensery::models::{Architecture, ConvNetSpec};
use condensery::{LabeledDataset, Tensor};

/// Deterministic pseudo-random tensor (no RNG dependency needed for fixtures).
pub fn ramp(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// Ten 1x32x32 clusters, enough to drive a desk-scale ConvNet.
pub fn blob_images(per_class: usize) -> LabeledDataset {
    make_blobs(10, per_class, [1, 32, 32], 1.0, 6.0, 0).expect("valid blob spec")
}

pub fn convnet(channels: usize) -> Architecture {
    Architecture::ConvNet(ConvNetSpec::new([1, 32, 32], 10).with_channels(channels))
}
