//! Centralized and FedAvg trainers: comparison points and correctness
//! oracles for the split protocol.

mod fedavg;

pub use fedavg::{fedavg_aggregate, run_fedavg_sequential, run_fedavg_tcp, run_fedavg_threaded, serve_fedavg, FedAvgClient};

use std::time::Instant;

use mpsl_tensor::{Graph, Sgd};

use crate::analysis::{evaluate, MetricLog, MetricRecord};
use crate::data::{stream_seed, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, info_nce, ParamStore, SplitModel};
use crate::protocol::{RunOptions, TrainedArtifacts, TrainingConfig};
use crate::transport::ByteLedger;

/// Separate optimizers for the head and for the body and tail, so every
/// method applies the same learning rates to the same parameters.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub head: Sgd,
    pub server: Sgd,
}

impl Optimizers {
    pub fn new(tc: &TrainingConfig) -> Self {
        Optimizers {
            head: Sgd::new(tc.head_lr, tc.momentum),
            server: Sgd::new(tc.server_lr, tc.momentum),
        }
    }

    pub fn reset(&mut self) {
        self.head.reset();
        self.server.reset();
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.head.step(params.iter_mut().filter(|(n, _)| n.starts_with("head.")))?;
        self.server.step(params.iter_mut().filter(|(n, _)| !n.starts_with("head.")))?;
        Ok(())
    }
}

/// One optimizer step of the monolithic model on the mean loss over
/// `idx`; returns the loss before the step.
pub fn centralized_step(model: &mut SplitModel, opts: &mut Optimizers, data: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Data("centralized step on an empty batch".into()));
    }
    let mut g = Graph::new(0);
    let (bound, out) = model.forward(&mut g, &data.inputs(idx))?;
    let loss = if model.config.is_retrieval() {
        info_nce(&mut g, out.prediction())?
    } else {
        cross_entropy(&mut g, out.prediction(), &data.labels_of(idx))?
    };
    let grads = g.backward(loss)?;
    model.params.accumulate(&bound, &grads)?;
    opts.step(&mut model.params)?;
    Ok(g.value(loss).item())
}

/// Centralized fine-tuning on the full training split with batch `|B|`.
pub fn run_centralized(init: &SplitModel, tc: &TrainingConfig, data: &Dataset, opts: &RunOptions) -> Result<TrainedArtifacts> {
    tc.validate()?;
    let mut model = init.clone();
    let mut optim = Optimizers::new(tc);
    let mut batches = BatchIter::new(data.train.clone(), tc.global_batch, stream_seed(tc.seed, 0), 0)?;
    let mut log = MetricLog::new();
    for r in 1..=tc.rounds {
        let start = Instant::now();
        let idx = batches.next_batch();
        let loss = centralized_step(&mut model, &mut optim, data, &idx)?;
        let eval_now = (tc.eval_every > 0 && r % tc.eval_every == 0) || r == tc.rounds;
        let (metric_name, metric_value) = if eval_now && !data.test.is_empty() {
            let e = evaluate(&model, data, &data.test)?;
            (e.metric_name.to_string(), Some(e.value))
        } else {
            (String::new(), None)
        };
        log.push(MetricRecord {
            round: r,
            method: "centralized".into(),
            loss,
            metric_name,
            metric_value,
            up_bytes: 0,
            down_bytes: 0,
            wall_ms: if opts.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
        })?;
    }
    Ok(TrainedArtifacts {
        method: "centralized",
        model: model.config.clone(),
        server: model.params,
        heads: Vec::new(),
        shard_sizes: vec![data.train.len()],
        log,
        ledger: ByteLedger::new(),
        recorder: None,
        backward_calls: Vec::new(),
    })
}
