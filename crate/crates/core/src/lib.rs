//! Learned latent graphs for graph convolutional networks.
//!
//! A [`dgm`] block maps node features to edge probabilities
//! `p_ij = exp(−t‖x̂_i − x̂_j‖²)` and samples a fixed in-degree graph with the
//! Gumbel-Top-k trick. Graph convolutions ([`layers`]) run on the sampled
//! graph, and the class-balanced graph loss ([`losses`]) trains the
//! probability branch through the discrete sampling step.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dgm;
pub mod error;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod segment;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
