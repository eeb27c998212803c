#![allow(dead_code)]

use std::sync::Arc;

use mpsl_core::data::{generate, Dataset, SyntheticSpec};
use mpsl_core::model::{ModelConfig, Precision, SplitModel};
use mpsl_core::protocol::{Federation, TrainingConfig};

pub fn tiny_model(precision: Precision, seed: u64) -> ModelConfig {
    ModelConfig { precision, init_seed: seed, ..Default::default() }
}

pub fn dataset(cfg: &ModelConfig, seed: u64) -> Arc<Dataset> {
    Arc::new(generate(&SyntheticSpec { seed, ..Default::default() }.matching(cfg)).unwrap())
}

pub struct Setup {
    pub fed: Federation,
    pub init: SplitModel,
    pub data: Arc<Dataset>,
}

pub fn setup(cfg: &ModelConfig, tc: &TrainingConfig) -> Setup {
    let data = dataset(cfg, tc.seed);
    let init = SplitModel::init(cfg).unwrap();
    let fed = Federation::new(cfg, tc, data.clone()).unwrap();
    Setup { fed, init, data }
}

pub fn training(clients: usize, rounds: u32, batch: usize) -> TrainingConfig {
    TrainingConfig {
        num_clients: clients,
        rounds,
        global_batch: batch,
        alpha: 1.0,
        eval_every: 0,
        ..Default::default()
    }
}
