use std::collections::BTreeSet;
use std::sync::Arc;

use mpsl_tensor::{Graph, Sgd, Tensor, Var};

use crate::data::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::model::{activation_dims, client_loss, head_forward, prediction_dims, Bound, ModelConfig, ParamStore};
use crate::protocol::Federation;
use crate::transport::{Frame, Message};

/// A client endpoint's behaviour: frames in, frames out.
pub trait ClientMachine: Send {
    fn id(&self) -> u32;

    /// Frames sent on connection.
    fn start(&mut self) -> Result<Vec<Frame>>;

    /// Reacts to one server frame.
    fn handle(&mut self, frame: Frame) -> Result<Vec<Frame>>;

    /// True once the client has nothing left to send or receive.
    fn finished(&self) -> bool;

    /// Current local model parameters (an in-process observer hook, never
    /// sent by itself).
    fn params(&self) -> &ParamStore;
}

#[derive(Debug, PartialEq, Eq)]
enum Awaiting {
    Prediction,
    CutGrad,
}

struct Pending {
    idx: Vec<usize>,
    /// Held back for the local loss; never serialized.
    labels: Option<Vec<usize>>,
    graph: Graph,
    bound: Bound,
    acts: Vec<Var>,
    act_dims: Vec<Vec<usize>>,
    awaiting: Awaiting,
}

/// MPSL client `n`: holds `D_n`, the head `F_Cn` and the labels of the
/// current batch `B_n`.
pub struct MpslClient {
    id: u32,
    cfg: ModelConfig,
    data: Arc<Dataset>,
    head: ParamStore,
    opt: Sgd,
    batches: BatchIter,
    rounds: u32,
    round: u32,
    pending: Option<Pending>,
    done: bool,
    fail_rounds: BTreeSet<u32>,
}

impl MpslClient {
    pub fn new(fed: &Federation, id: u32, head: ParamStore) -> Result<MpslClient> {
        let n = id as usize;
        let shard = fed
            .shards
            .get(n)
            .ok_or_else(|| Error::Protocol(format!("unknown client {id}")))?
            .clone();
        if shard.is_empty() {
            return Err(Error::Data(format!("client {id} has an empty local dataset")));
        }
        let batches = BatchIter::new(shard, fed.batches[n], fed.batch_seed(id), id)?;
        Ok(MpslClient {
            id,
            cfg: fed.model.clone(),
            data: fed.data.clone(),
            head,
            opt: Sgd::new(fed.training.head_lr, fed.training.momentum),
            batches,
            rounds: fed.training.rounds,
            round: 0,
            pending: None,
            done: false,
            fail_rounds: BTreeSet::new(),
        })
    }

    /// Makes the client answer the prediction of `round` with `Abort`
    /// instead of its loss, once (dropout injection).
    pub fn fail_at(mut self, round: u32) -> Self {
        self.fail_rounds.insert(round);
        self
    }

    pub fn head(&self) -> &ParamStore {
        &self.head
    }

    fn frame(&self, round: u32, message: Message) -> Frame {
        Frame::new(round, self.id, message)
    }

    /// Tokenizes the batch and keeps the graph for the head
    /// backward.
    fn forward(&mut self, idx: Vec<usize>) -> Result<Frame> {
        let mut graph = Graph::new(u64::from(self.round));
        let bound = self.head.bind(&mut graph);
        let inputs = self.data.inputs(&idx);
        let acts = head_forward(&mut graph, &self.cfg, &bound, &inputs)?.vars();
        let tensors: Vec<Tensor> = acts.iter().map(|&v| graph.value(v).clone().with_requires_grad(false)).collect();
        let labels = (!self.cfg.is_retrieval()).then(|| self.data.labels_of(&idx));
        let act_dims = activation_dims(&self.cfg, idx.len(), inputs.text_tokens);
        self.pending = Some(Pending {
            idx,
            labels,
            graph,
            bound,
            acts,
            act_dims,
            awaiting: Awaiting::Prediction,
        });
        Ok(self.frame(self.round, Message::Activations(tensors)))
    }

    fn next_round(&mut self) -> Result<Frame> {
        if self.round < self.rounds {
            self.round += 1;
            let idx = self.batches.next_batch();
            self.forward(idx)
        } else {
            self.done = true;
            self.pending = None;
            let trainable: Vec<Tensor> = self
                .head
                .iter()
                .filter(|(_, t)| t.requires_grad())
                .map(|(_, t)| t.clone().with_requires_grad(false))
                .collect();
            Ok(self.frame(self.rounds + 1, Message::ModelPush(trainable)))
        }
    }

    fn pending(&mut self, round: u32, awaiting: Awaiting, what: &str) -> Result<&mut Pending> {
        if round != self.round {
            return Err(Error::Protocol(format!(
                "client {}: {what} for round {round} while in round {}",
                self.id, self.round
            )));
        }
        match &mut self.pending {
            Some(p) if p.awaiting == awaiting => Ok(p),
            _ => Err(Error::Protocol(format!("client {}: unexpected {what} in round {round}", self.id))),
        }
    }

    /// Evaluates `L_Cn` locally; uploads the scalar with `|B_n|`
    /// and `∂L_Cn/∂ŷ`.
    fn on_prediction(&mut self, round: u32, pred: Tensor) -> Result<Vec<Frame>> {
        let id = self.id;
        let cfg = self.cfg.clone();
        let p = self.pending(round, Awaiting::Prediction, "prediction")?;
        let b = p.idx.len();
        let expected = prediction_dims(&cfg, b);
        if pred.dims() != expected.as_slice() {
            return Err(Error::Protocol(format!(
                "client {id}: prediction {:?} does not match the pending batch ({expected:?})",
                pred.dims()
            )));
        }
        if self.fail_rounds.remove(&round) {
            return Ok(vec![self.frame(round, Message::Abort(format!("client {id} dropped out of round {round}")))]);
        }
        let p = self.pending.as_mut().expect("checked above");
        let loss = client_loss(&pred, p.labels.as_deref())?;
        p.awaiting = Awaiting::CutGrad;
        let grad = Tensor::new(pred.dims().to_vec(), loss.grad, pred.dtype())?;
        Ok(vec![
            self.frame(round, Message::Loss { value: loss.value as f32, count: b as u32 }),
            self.frame(round, Message::CutGrad(vec![grad])),
        ])
    }

    /// Backpropagates the received cut-layer gradient through the head and
    /// steps its optimizer.
    fn on_cut_grad(&mut self, round: u32, grads: Vec<Tensor>) -> Result<Vec<Frame>> {
        let id = self.id;
        let p = self.pending(round, Awaiting::CutGrad, "cut-layer gradient")?;
        let dims: Vec<&[usize]> = grads.iter().map(Tensor::dims).collect();
        if dims.len() != p.act_dims.len() || dims.iter().zip(&p.act_dims).any(|(a, b)| *a != b.as_slice()) {
            return Err(Error::Protocol(format!(
                "client {id}: cut-layer gradient shapes {dims:?} do not match activations {:?}",
                p.act_dims
            )));
        }
        let seeds: Vec<(Var, Vec<f64>)> = p.acts.iter().zip(grads).map(|(&v, t)| (v, t.into_data())).collect();
        let g = p.graph.backward_from(&seeds)?;
        let p = self.pending.take().expect("checked above");
        self.head.accumulate(&p.bound, &g)?;
        self.head.step(&mut self.opt)?;
        Ok(vec![self.next_round()?])
    }

    fn on_abort(&mut self, round: u32) -> Result<Vec<Frame>> {
        let idx = match &self.pending {
            Some(p) if round == self.round => p.idx.clone(),
            _ => return Err(Error::Protocol(format!("client {}: abort for round {round} without a pending batch", self.id))),
        };
        Ok(vec![self.forward(idx)?])
    }
}

impl ClientMachine for MpslClient {
    fn id(&self) -> u32 {
        self.id
    }

    fn start(&mut self) -> Result<Vec<Frame>> {
        let register = self.frame(0, Message::Register);
        Ok(vec![register, self.next_round()?])
    }

    fn handle(&mut self, frame: Frame) -> Result<Vec<Frame>> {
        if frame.client_id != self.id {
            return Err(Error::Protocol(format!(
                "client {} received a frame addressed to client {}",
                self.id, frame.client_id
            )));
        }
        match frame.message {
            Message::Prediction(t) => self.on_prediction(frame.round, t),
            Message::CutGrad(ts) => self.on_cut_grad(frame.round, ts),
            Message::Abort(_) => self.on_abort(frame.round),
            other => Err(Error::Protocol(format!(
                "client {}: unexpected {:?} frame",
                self.id,
                other.msg_type()
            ))),
        }
    }

    fn finished(&self) -> bool {
        self.done
    }

    fn params(&self) -> &ParamStore {
        &self.head
    }
}
