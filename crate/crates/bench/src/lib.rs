//! Shared inputs for the benchmarks.

use spikecalib::ann::Arch;
use spikecalib::{data, Dataset, Network};

/// An untrained `cnn-small` (folded) and a batch of synthetic digits.
pub fn cnn_fixture(samples: usize, seed: u64) -> (Network, Dataset) {
    let data = data::digits(samples, seed);
    let net = Arch::CnnSmall
        .build(data.sample_shape(), 10, seed)
        .and_then(|n| n.fold_bn())
        .expect("cnn-small builds");
    (net, data)
}

/// An untrained `mlp-small` (folded) and a batch of blob samples.
pub fn mlp_fixture(samples: usize, seed: u64) -> (Network, Dataset) {
    let data = data::blobs(samples, 4, 8, seed);
    let net = Arch::MlpSmall
        .build(data.sample_shape(), 4, seed)
        .and_then(|n| n.fold_bn())
        .expect("mlp-small builds");
    (net, data)
}
