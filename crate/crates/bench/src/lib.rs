//! Shared fixtures for the benchmarks.

use relbev_core::model::ModelConfig;
use relbev_core::train::{toy_sample, TrainSample};
use relbev_core::ParamSet;

/// The toy training scene with freshly initialized desk-scale weights.
pub fn toy_fixture(seed: u64) -> (ModelConfig, TrainSample, ParamSet) {
    let cfg = ModelConfig::desk();
    let sample = toy_sample(seed, &cfg).expect("toy scene");
    let ps = relbev_core::model::init_params(&cfg, &sample.geom.grid, seed).expect("init");
    (cfg, sample, ps)
}
