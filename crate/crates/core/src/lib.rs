//! Relation-enhanced multi-camera to bird's-eye-view (BEV) fusion.
//!
//! The crate is organized bottom-up: [`tensor`] provides the autodiff
//! kernel, [`geometry`] the camera and grid model, [`graph`] the bipartite
//! camera-to-cell relation graph, [`encoder`] the BEV transformer with
//! graph-attention fusion weights, [`heads`] detection/segmentation heads
//! and losses, [`degradation`] view masking, [`sim`] the synthetic scene
//! generator and [`metrics`] the detection evaluation suite.

pub mod error;
pub mod tensor;
pub mod geometry;
pub mod graph;
pub mod encoder;
pub mod heads;
pub mod degradation;
pub mod sim;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Parameter, ParamSet, Tape, Tensor, Var};

/// Independent random stream `stream` derived from one run seed.
pub fn named_rng(seed: u64, stream: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(degradation::fnv1a64(stream.as_bytes()));
    rng
}
