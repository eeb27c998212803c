use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, stream_seed, DataTask, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Round-level training hyperparameters shared by every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// `N`
    pub num_clients: usize,
    /// `R`
    pub rounds: u32,
    /// `|B|`, split across clients by [`allocate_batches`].
    pub global_batch: usize,
    /// Learning rate of the head `W_h`.
    pub head_lr: f64,
    /// Learning rate of the body and tail `[W_b; W_t]`.
    pub server_lr: f64,
    pub momentum: f64,
    /// Dirichlet concentration of the client partition.
    pub alpha: f64,
    /// FedAvg local epochs `E`.
    pub local_epochs: usize,
    /// Evaluate every this many rounds; 0 evaluates only after training.
    pub eval_every: u32,
    /// Retries of a round aborted by a missing client before giving up.
    pub max_retries: u32,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_clients: 2,
            rounds: 20,
            global_batch: 8,
            head_lr: 0.05,
            server_lr: 0.05,
            momentum: 0.0,
            alpha: 0.1,
            local_epochs: 1,
            eval_every: 1,
            max_retries: 1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("training.num_clients must be at least 1".into()));
        }
        if self.global_batch < self.num_clients {
            return Err(Error::Config(format!(
                "training.global_batch {} leaves some of the {} clients without samples",
                self.global_batch, self.num_clients
            )));
        }
        for (key, v) in [("training.head_lr", self.head_lr), ("training.server_lr", self.server_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("training.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("training.alpha must be positive, got {}", self.alpha)));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("training.local_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Splits `global` samples over `clients`: equal shares, remainder to the
/// lowest ids.
pub fn allocate_batches(global: usize, clients: usize) -> Result<Vec<usize>> {
    if clients == 0 || global < clients {
        return Err(Error::Config(format!(
            "a global batch of {global} cannot give each of {clients} clients a sample"
        )));
    }
    let (q, r) = (global / clients, global % clients);
    Ok((0..clients).map(|n| q + usize::from(n < r)).collect())
}

/// Clients' data and batch sizes derived deterministically from the
/// configuration.
#[derive(Clone, Debug)]
pub struct Federation {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: Arc<Dataset>,
    pub partition: Partition,
    /// Dataset indices held by each client.
    pub shards: Vec<Vec<usize>>,
    /// `|B_n|` for each client.
    pub batches: Vec<usize>,
}

impl Federation {
    pub fn new(model: &ModelConfig, training: &TrainingConfig, data: Arc<Dataset>) -> Result<Federation> {
        training.validate()?;
        let model = model.resolved()?;
        check_compatible(&model, &data)?;
        let batches = allocate_batches(training.global_batch, training.num_clients)?;
        let labels = data.labels_of(&data.train);
        let min = batches.iter().copied().max().unwrap_or(1);
        let partition = dirichlet_partition(&labels, training.num_clients, training.alpha, training.seed, min)?;
        let shards = (0..training.num_clients as u32)
            .map(|n| partition.shard(n).into_iter().map(|p| data.train[p]).collect())
            .collect();
        Ok(Federation { model, training: training.clone(), data, partition, shards, batches })
    }

    pub fn num_clients(&self) -> usize {
        self.batches.len()
    }

    /// `|D_n|` for each client.
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Rounds in which the global batch covers the training set once:
    /// `⌊|D| / |B|⌋`, at least 1.
    pub fn rounds_per_epoch(&self) -> u32 {
        (self.data.train.len() / self.training.global_batch).max(1) as u32
    }

    pub fn batch_seed(&self, client: u32) -> u64 {
        stream_seed(self.training.seed, client)
    }
}

fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    for &m in &model.modalities {
        if !data.spec.modalities.contains(&m) {
            return Err(Error::Config(format!("model modality `{m}` is absent from the dataset")));
        }
    }
    match (data.spec.task, model.is_retrieval()) {
        (DataTask::Retrieval, true) | (DataTask::Classification, false) => {}
        _ => {
            return Err(Error::Config(format!(
                "dataset task {:?} does not match the model task",
                data.spec.task
            )))
        }
    }
    if let Some(c) = model.num_classes() {
        if c != data.num_classes() {
            return Err(Error::Config(format!(
                "model predicts {c} classes but the dataset has {}",
                data.num_classes()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_gives_remainder_to_low_ids() {
        assert_eq!(allocate_batches(10, 4).unwrap(), vec![3, 3, 2, 2]);
        assert_eq!(allocate_batches(8, 1).unwrap(), vec![8]);
        assert!(allocate_batches(3, 4).is_err());
    }
}
