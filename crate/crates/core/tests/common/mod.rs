//! The synthetic benchmark shared by the integration and acceptance tests.
#![allow(dead_code)]

use dgm::config::{ModelConfig, NodeConv};
use dgm::data::{synth_clusters, ClusterSpec, NodeDataset};

pub const NODES: usize = 300;
pub const CLASSES: usize = 3;

/// Tight clusters in a 3-d graph modality; a weak, noisy copy of the class
/// signal in an 8-d node modality.
pub fn benchmark_spec(seed: u64) -> ClusterSpec {
    let mut spec = ClusterSpec::new(NODES, CLASSES, 8, 3, 1.0, 0.1, seed);
    spec.node_signal = 2.0;
    spec
}

pub fn benchmark_data(seed: u64) -> NodeDataset {
    synth_clusters(&benchmark_spec(seed)).unwrap()
}

/// Two SGCN layers sampling a single neighbour each.
pub fn benchmark_config(seed: u64) -> ModelConfig {
    let mut config = ModelConfig {
        node_conv: NodeConv::Sgcn,
        standardize: false,
        seed,
        ..ModelConfig::default()
    };
    config.layers.iter_mut().for_each(|l| l.k = 1);
    config
}
