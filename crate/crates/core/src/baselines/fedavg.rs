use std::sync::Arc;
use std::time::{Duration, Instant};

use mpsl_tensor::Tensor;

use crate::analysis::{evaluate, MetricLog, MetricRecord};
use crate::baselines::{centralized_step, Optimizers};
use crate::data::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::model::{ParamStore, SplitModel};
use crate::protocol::{
    accept_links, collect_pushes, fill_trainable, join_clients, recv, register_links, run_client, ClientMachine,
    Federation, Link, LocalLink, RunOptions, TrainedArtifacts,
};
use crate::transport::{channel_pair, tcp_listen, ByteLedger, Endpoint, Frame, FrameRecorder, Message, TcpEndpoint};

/// `|D_n|`-weighted parameter mean (weights are normalized internally).
pub fn fedavg_aggregate(models: &[&ParamStore], sizes: &[usize]) -> Result<ParamStore> {
    let w: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    ParamStore::weighted_average(models, &w)
}

fn trainable_tensors(p: &ParamStore) -> Vec<Tensor> {
    p.iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.clone().with_requires_grad(false))
        .collect()
}

/// FedAvg client: on each `ModelPull` it trains `E` local epochs from the
/// global parameters and pushes the result with its mean training loss.
pub struct FedAvgClient {
    id: u32,
    data: Arc<Dataset>,
    model: SplitModel,
    optim: Optimizers,
    batches: BatchIter,
    epochs: usize,
    rounds: u32,
    done: bool,
}

impl FedAvgClient {
    pub fn new(fed: &Federation, id: u32, init: &SplitModel) -> Result<FedAvgClient> {
        let n = id as usize;
        let shard = fed
            .shards
            .get(n)
            .ok_or_else(|| Error::Protocol(format!("unknown client {id}")))?
            .clone();
        Ok(FedAvgClient {
            id,
            data: fed.data.clone(),
            model: init.clone(),
            optim: Optimizers::new(&fed.training),
            batches: BatchIter::new(shard, fed.batches[n], fed.batch_seed(id), id)?,
            epochs: fed.training.local_epochs,
            rounds: fed.training.rounds,
            done: fed.training.rounds == 0,
        })
    }

    fn train(&mut self, round: u32, global: Vec<Tensor>) -> Result<Vec<Frame>> {
        self.model.params = fill_trainable(&self.model.params, global)?;
        self.optim.reset();
        let steps = self.epochs * self.batches.batches_per_epoch();
        let mut total = 0.0;
        let mut samples = 0;
        for _ in 0..steps {
            let idx = self.batches.next_batch();
            total += centralized_step(&mut self.model, &mut self.optim, &self.data, &idx)?;
            samples += idx.len();
        }
        if round == self.rounds {
            self.done = true;
        }
        Ok(vec![
            Frame::new(round, self.id, Message::ModelPush(trainable_tensors(&self.model.params))),
            Frame::new(round, self.id, Message::Loss { value: (total / steps as f64) as f32, count: samples as u32 }),
        ])
    }
}

impl ClientMachine for FedAvgClient {
    fn id(&self) -> u32 {
        self.id
    }

    fn start(&mut self) -> Result<Vec<Frame>> {
        Ok(vec![Frame::new(0, self.id, Message::Register)])
    }

    fn handle(&mut self, frame: Frame) -> Result<Vec<Frame>> {
        match frame.message {
            Message::ModelPull(ts) if frame.client_id == self.id => self.train(frame.round, ts),
            other => Err(Error::Protocol(format!(
                "FedAvg client {}: unexpected {:?} frame",
                self.id,
                other.msg_type()
            ))),
        }
    }

    fn finished(&self) -> bool {
        self.done
    }

    fn params(&self) -> &ParamStore {
        &self.model.params
    }
}

/// Runs the FedAvg server over connected links.
pub fn serve_fedavg(fed: &Federation, init: &SplitModel, links: Vec<Box<dyn Link>>, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let tc = &fed.training;
    let ledger = ByteLedger::new();
    let recorder = opts.record.then(FrameRecorder::new);
    let mut links = register_links(links, fed.num_clients(), opts.timeout, &ledger, recorder.as_ref())?;
    let sizes = fed.shard_sizes();
    let total: usize = sizes.iter().sum();
    let mut global = init.params.clone();
    let mut log = MetricLog::new();
    for r in 1..=tc.rounds {
        let start = Instant::now();
        let pull = trainable_tensors(&global);
        for link in links.iter_mut() {
            let id = link.link();
            link.send(&Frame::new(r, id, Message::ModelPull(pull.clone())))?;
        }
        let models = collect_pushes(&mut links, r, &global, opts.timeout)?;
        let mut loss = 0.0;
        for (link, &n) in links.iter_mut().zip(&sizes) {
            let f = recv(link, opts.timeout)?;
            match f.message {
                Message::Loss { value, .. } if f.round == r => loss += n as f64 / total as f64 * f64::from(value),
                _ => {
                    return Err(Error::Protocol(format!(
                        "client {} sent {:?} where its round {r} loss was expected",
                        f.client_id,
                        f.msg_type()
                    )))
                }
            }
        }
        let refs: Vec<&ParamStore> = models.iter().collect();
        global = fedavg_aggregate(&refs, &sizes)?;
        ledger.complete_round(r);
        let eval_now = (tc.eval_every > 0 && r % tc.eval_every == 0) || r == tc.rounds;
        let (metric_name, metric_value) = if eval_now && !fed.data.test.is_empty() {
            let model = SplitModel { config: fed.model.clone(), params: global.clone() };
            let e = evaluate(&model, &fed.data, &fed.data.test)?;
            (e.metric_name.to_string(), Some(e.value))
        } else {
            (String::new(), None)
        };
        let (up, down) = ledger.round_bytes(r);
        log.push(MetricRecord {
            round: r,
            method: "fedavg".into(),
            loss,
            metric_name,
            metric_value,
            up_bytes: up,
            down_bytes: down,
            wall_ms: if opts.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
        })?;
    }
    Ok(TrainedArtifacts {
        method: "fedavg",
        model: fed.model.clone(),
        server: global,
        heads: Vec::new(),
        shard_sizes: sizes,
        log,
        ledger,
        recorder,
        backward_calls: Vec::new(),
    })
}

fn clients(fed: &Federation, init: &SplitModel) -> Result<Vec<FedAvgClient>> {
    (0..fed.num_clients() as u32).map(|n| FedAvgClient::new(fed, n, init)).collect()
}

pub fn run_fedavg_sequential(fed: &Federation, init: &SplitModel, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let links = clients(fed, init)?
        .into_iter()
        .map(|c| Ok(Box::new(LocalLink::new(c)?) as Box<dyn Link>))
        .collect::<Result<Vec<_>>>()?;
    serve_fedavg(fed, init, links, opts)
}

pub fn run_fedavg_threaded(fed: &Federation, init: &SplitModel, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let cs = clients(fed, init)?;
    std::thread::scope(|s| {
        let mut links: Vec<Box<dyn Link>> = Vec::new();
        let mut handles = Vec::new();
        for mut c in cs {
            let (server_end, mut client_end) = channel_pair();
            links.push(Box::new(server_end));
            handles.push(s.spawn(move || run_client(&mut c, &mut client_end)));
        }
        let out = serve_fedavg(fed, init, links, opts);
        join_clients(handles, out)
    })
}

pub fn run_fedavg_tcp(fed: &Federation, init: &SplitModel, addr: &str, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let listener = tcp_listen(addr)?;
    let local = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?.to_string();
    let cs = clients(fed, init)?;
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for mut c in cs {
            let local = local.clone();
            handles.push(s.spawn(move || {
                let mut ep = TcpEndpoint::connect(&local, Duration::from_secs(10))?;
                run_client(&mut c, &mut ep)
            }));
        }
        let out = accept_links(&listener, fed.num_clients()).and_then(|links| serve_fedavg(fed, init, links, opts));
        join_clients(handles, out)
    })
}
