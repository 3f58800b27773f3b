//! Shared fixtures for the benchmarks.

use avloc_core::encoders::{Backends, ToyConfig};
use avloc_core::synth::{planted_pairs, prepare_planted, PlantedConfig};
use avloc_core::training::{initial_params, PreparedSample, TrainConfig, Trainable};

pub struct PlantedBatch {
    pub backends: Backends,
    pub samples: Vec<PreparedSample>,
    pub train: TrainConfig,
    pub params: Trainable,
}

/// `pairs` planted samples encoded with the default toy backends.
pub fn planted_batch(pairs: usize, image_size: usize) -> PlantedBatch {
    let toy = ToyConfig::default();
    let cfg = PlantedConfig {
        pairs,
        image_size,
        duration_secs: 2.0,
        ..PlantedConfig::default()
    };
    let backends = Backends::toy(&toy, cfg.image_size, cfg.sample_rate).expect("toy backends");
    let data = planted_pairs(&cfg, &toy).expect("planted pairs");
    let samples = prepare_planted(&data, &cfg, &backends).expect("encode planted pairs");
    let train = TrainConfig {
        batch_size: pairs,
        ..TrainConfig::default()
    };
    let params = initial_params(&train, &backends);
    PlantedBatch {
        backends,
        samples,
        train,
        params,
    }
}
