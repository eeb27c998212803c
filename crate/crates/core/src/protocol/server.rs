use std::collections::BTreeMap;

use mpsl_tensor::{Graph, Sgd, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{aggregate_losses, server_predict, Activations, Bound, Fusion, ModelConfig, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CollectingActivations,
    AwaitingLosses,
    BackwardDone,
}

struct Upload {
    acts: Vec<Var>,
    batch: usize,
    prediction: Var,
}

/// Server-side state of one round: the retained graph, every client's
/// activations and prediction, and the returned losses.
pub struct ServerRoundState {
    round: u32,
    phase: Phase,
    graph: Graph,
    bound: Bound,
    uploads: BTreeMap<u32, Upload>,
    losses: BTreeMap<u32, (f32, u32)>,
    out_grads: BTreeMap<u32, Tensor>,
}

impl ServerRoundState {
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// `|B| = Σ|B_n|` over uploaded clients.
    pub fn total_batch(&self) -> usize {
        self.uploads.values().map(|u| u.batch).sum()
    }
}

/// Outcome of the round's single backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult {
    pub round: u32,
    /// `L_S` from the clients' reported losses.
    pub loss: f64,
    /// `∂L_S/∂a_n` for each client, in client order.
    pub cut_grads: Vec<(u32, Vec<Tensor>)>,
}

/// The MPSL server holding `F_S = [W_b; W_t]`.
pub struct MpslServer {
    cfg: ModelConfig,
    params: ParamStore,
    opt: Sgd,
    expected: Vec<u32>,
    state: Option<ServerRoundState>,
    backward_calls: Vec<usize>,
    record_gradients: bool,
    last_gradients: BTreeMap<String, Vec<f64>>,
}

impl MpslServer {
    pub fn new(cfg: &ModelConfig, params: ParamStore, lr: f64, momentum: f64, expected: Vec<u32>) -> Self {
        let mut expected = expected;
        expected.sort_unstable();
        MpslServer {
            cfg: cfg.clone(),
            params,
            opt: Sgd::new(lr, momentum),
            expected,
            state: None,
            backward_calls: Vec::new(),
            record_gradients: false,
            last_gradients: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn expected(&self) -> &[u32] {
        &self.expected
    }

    pub fn state(&self) -> Option<&ServerRoundState> {
        self.state.as_ref()
    }

    /// Backward invocations of each completed round's graph.
    pub fn backward_calls(&self) -> &[usize] {
        &self.backward_calls
    }

    /// Keeps a copy of each round's `∂L_S/∂F_S` from before the optimizer
    /// step.
    pub fn record_gradients(&mut self, on: bool) {
        self.record_gradients = on;
    }

    /// Gradients of the last backward pass by parameter name; empty unless
    /// recording is on.
    pub fn last_gradients(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.last_gradients
    }

    /// Starts (or restarts, after an abort) round `round` on a fresh graph.
    pub fn begin_round(&mut self, round: u32) {
        let mut graph = Graph::new(u64::from(round));
        let bound = self.params.bind(&mut graph);
        self.state = Some(ServerRoundState {
            round,
            phase: Phase::CollectingActivations,
            graph,
            bound,
            uploads: BTreeMap::new(),
            losses: BTreeMap::new(),
            out_grads: BTreeMap::new(),
        });
    }

    fn check(&self, client: u32, round: u32) -> Result<()> {
        if self.expected.binary_search(&client).is_err() {
            return Err(Error::Protocol(format!("unknown client {client}")));
        }
        match &self.state {
            Some(s) if s.round == round => Ok(()),
            Some(s) => Err(Error::Protocol(format!(
                "stale round {round} from client {client} (server is in round {})",
                s.round
            ))),
            None => Err(Error::Protocol(format!("client {client} sent round {round} before any round began"))),
        }
    }

    /// For one client: predicts on its activations, keeping the
    /// graph for the round's backward, and returns `ŷ`.
    pub fn on_activations(&mut self, client: u32, round: u32, tensors: Vec<Tensor>) -> Result<Tensor> {
        self.check(client, round)?;
        let cfg = &self.cfg;
        let s = self.state.as_mut().expect("checked");
        if s.phase != Phase::CollectingActivations {
            return Err(Error::Protocol(format!("round {round}: activations after collection closed")));
        }
        if s.uploads.contains_key(&client) {
            return Err(Error::Protocol(format!("duplicate activation upload from client {client} in round {round}")));
        }
        let parts = match cfg.fusion {
            Fusion::Early => 1,
            Fusion::Late => cfg.modalities.len(),
        };
        if tensors.len() != parts {
            return Err(Error::Protocol(format!(
                "client {client}: {} activation tensors for {:?} fusion (expected {parts})",
                tensors.len(),
                cfg.fusion
            )));
        }
        let batch = tensors[0].dims().first().copied().unwrap_or(0);
        for t in &tensors {
            let d = t.dims();
            if d.len() != 3 || d[0] != batch || d[2] != cfg.embed_dim || batch == 0 || t.dtype() != cfg.dtype() {
                return Err(Error::Protocol(format!(
                    "client {client}: activation shape {d:?} ({:?}) does not fit batch {batch} × seq × {}",
                    t.dtype(),
                    cfg.embed_dim
                )));
            }
        }
        let acts: Vec<Var> = tensors.into_iter().map(|t| s.graph.insert(t.with_requires_grad(true))).collect();
        let a = match cfg.fusion {
            Fusion::Early => Activations::Early(acts[0]),
            Fusion::Late => Activations::Late(acts.clone()),
        };
        let prediction = server_predict(&mut s.graph, cfg, &s.bound, &a)?.prediction();
        let out = s.graph.value(prediction).clone().with_requires_grad(false);
        s.uploads.insert(client, Upload { acts, batch, prediction });
        if s.uploads.len() == self.expected.len() {
            s.phase = Phase::AwaitingLosses;
        }
        Ok(out)
    }

    fn upload(&self, client: u32, round: u32, what: &str) -> Result<&Upload> {
        self.check(client, round)?;
        let s = self.state.as_ref().expect("checked");
        if s.phase == Phase::BackwardDone {
            return Err(Error::Protocol(format!("round {round}: {what} from client {client} after the backward pass")));
        }
        s.uploads
            .get(&client)
            .ok_or_else(|| Error::Protocol(format!("client {client}: {what} before any prediction in round {round}")))
    }

    pub fn on_loss(&mut self, client: u32, round: u32, value: f32, count: u32) -> Result<()> {
        let batch = self.upload(client, round, "loss")?.batch;
        if count as usize != batch {
            return Err(Error::Protocol(format!(
                "client {client}: loss over {count} samples for a batch of {batch}"
            )));
        }
        let s = self.state.as_mut().expect("checked");
        if s.losses.insert(client, (value, count)).is_some() {
            return Err(Error::Protocol(format!("duplicate loss from client {client} in round {round}")));
        }
        Ok(())
    }

    /// Records `∂L_Cn/∂ŷ` uploaded by the client.
    pub fn on_output_grad(&mut self, client: u32, round: u32, grad: Tensor) -> Result<()> {
        let pred = self.upload(client, round, "output gradient")?.prediction;
        let s = self.state.as_mut().expect("checked");
        if grad.dims() != s.graph.dims(pred) {
            return Err(Error::Protocol(format!(
                "client {client}: output gradient {:?} does not match prediction {:?}",
                grad.dims(),
                s.graph.dims(pred)
            )));
        }
        if s.out_grads.insert(client, grad).is_some() {
            return Err(Error::Protocol(format!("duplicate output gradient from client {client} in round {round}")));
        }
        Ok(())
    }

    /// Expected clients whose activations, loss or output gradient are
    /// still outstanding.
    pub fn missing(&self) -> Vec<u32> {
        let Some(s) = &self.state else { return self.expected.clone() };
        self.expected
            .iter()
            .copied()
            .filter(|c| !(s.uploads.contains_key(c) && s.losses.contains_key(c) && s.out_grads.contains_key(c)))
            .collect()
    }

    /// Builds `L_S` over every client's prediction, runs the
    /// single backward, steps `F_S` and returns the cut-layer gradients.
    pub fn backward_round(&mut self) -> Result<RoundResult> {
        let missing = self.missing();
        let s = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Protocol("backward requested before any round began".into()))?;
        if s.phase == Phase::BackwardDone {
            return Err(Error::Protocol(format!("round {} already ran its backward pass", s.round)));
        }
        if !missing.is_empty() || s.phase != Phase::AwaitingLosses {
            return Err(Error::Barrier { round: s.round, missing });
        }
        let mut terms = Vec::with_capacity(self.expected.len());
        let mut loss = 0.0;
        let total = s.total_batch() as f64;
        for c in &self.expected {
            let u = &s.uploads[c];
            let (value, count) = s.losses[c];
            let g = s.out_grads.remove(c).expect("checked by missing()");
            let ext = s.graph.external(u.prediction, f64::from(value), g.into_data())?;
            terms.push((ext, count as usize));
            loss += count as f64 / total * f64::from(value);
        }
        let ls = aggregate_losses(&mut s.graph, &terms)?;
        let grads = s.graph.backward(ls)?;
        self.params.accumulate(&s.bound, &grads)?;
        if self.record_gradients {
            self.last_gradients = self
                .params
                .iter()
                .filter_map(|(n, t)| t.grad().map(|g| (n.to_string(), g.to_vec())))
                .collect();
        }
        self.params.step(&mut self.opt)?;
        let mut cut_grads = Vec::with_capacity(self.expected.len());
        for c in &self.expected {
            let u = &s.uploads[c];
            let ts = u
                .acts
                .iter()
                .map(|&v| {
                    let dims = s.graph.dims(v).to_vec();
                    let data = grads.get(v).map_or_else(|| vec![0.0; dims.iter().product()], <[f64]>::to_vec);
                    Tensor::new(dims, data, self.cfg.dtype())
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            cut_grads.push((*c, ts));
        }
        s.phase = Phase::BackwardDone;
        self.backward_calls.push(s.graph.backward_calls());
        Ok(RoundResult { round: s.round, loss, cut_grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{head_forward, Inputs, SplitModel};
    use mpsl_tensor::DType;

    fn setup() -> (SplitModel, MpslServer, Vec<Tensor>, Vec<Tensor>) {
        let cfg = ModelConfig { precision: crate::model::Precision::F64, ..Default::default() };
        let model = SplitModel::init(&cfg).unwrap();
        let cfg = model.config.clone();
        let server = MpslServer::new(&cfg, model.server(), 0.1, 0.0, vec![0, 1]);
        let acts = |seed: usize, b: usize| -> Vec<Tensor> {
            let inputs = Inputs {
                size: b,
                vision: Some((0..b * 64).map(|i| ((i * 7 + seed) % 11) as f64 / 11.0).collect()),
                audio: None,
                text: Some((0..b * cfg.text_len).map(|i| (i + seed) % cfg.vocab_size).collect()),
                text_tokens: cfg.text_len,
            };
            let mut g = Graph::new(0);
            let bound = model.head().bind(&mut g);
            head_forward(&mut g, &cfg, &bound, &inputs)
                .unwrap()
                .vars()
                .iter()
                .map(|&v| g.value(v).clone().with_requires_grad(false))
                .collect()
        };
        let (a, b) = (acts(0, 2), acts(3, 3));
        (model, server, a, b)
    }

    #[test]
    fn clients_join_only_at_shared_parameters() {
        let (_, mut server, a, b) = setup();
        server.begin_round(1);
        server.on_activations(0, 1, a).unwrap();
        server.on_activations(1, 1, b).unwrap();
        let s = server.state.as_mut().unwrap();
        let pa = s.uploads[&0].prediction;
        let act_b = s.uploads[&1].acts[0];
        let act_a = s.uploads[&0].acts[0];
        let loss_a = s.graph.sum(pa);
        let g = s.graph.backward(loss_a).unwrap();
        assert!(g.get(act_b).is_none_or(|x| x.iter().all(|&v| v == 0.0)));
        assert!(g.get(act_a).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn contract_violations_are_protocol_errors() {
        let (_, mut server, a, b) = setup();
        server.begin_round(1);
        assert!(matches!(server.on_activations(5, 1, a.clone()), Err(Error::Protocol(_))));
        assert!(matches!(server.on_activations(0, 2, a.clone()), Err(Error::Protocol(_))));
        server.on_activations(0, 1, a.clone()).unwrap();
        assert!(matches!(server.on_activations(0, 1, a), Err(Error::Protocol(_))));
        assert!(matches!(server.on_loss(0, 1, 0.5, 7), Err(Error::Protocol(_))));
        assert!(matches!(server.on_loss(1, 1, 0.5, 3), Err(Error::Protocol(_))));
        let wrong = Tensor::zeros(&[2, 1], DType::F64);
        assert!(matches!(server.on_output_grad(0, 1, wrong), Err(Error::Protocol(_))));
        server.on_activations(1, 1, b).unwrap();
    }

    #[test]
    fn backward_before_all_losses_is_a_barrier_violation() {
        let (_, mut server, a, b) = setup();
        server.begin_round(1);
        let pa = server.on_activations(0, 1, a).unwrap();
        assert!(matches!(server.backward_round(), Err(Error::Barrier { round: 1, .. })));
        let pb = server.on_activations(1, 1, b).unwrap();
        assert_eq!(server.state().unwrap().phase(), Phase::AwaitingLosses);
        server.on_loss(0, 1, 1.0, 2).unwrap();
        server.on_output_grad(0, 1, Tensor::zeros(pa.dims(), DType::F64)).unwrap();
        match server.backward_round() {
            Err(Error::Barrier { round, missing }) => assert_eq!((round, missing), (1, vec![1])),
            other => panic!("expected barrier violation, got {other:?}"),
        }
        server.on_loss(1, 1, 0.5, 3).unwrap();
        server.on_output_grad(1, 1, Tensor::zeros(pb.dims(), DType::F64)).unwrap();
        let r = server.backward_round().unwrap();
        assert!((r.loss - (0.4 * 1.0 + 0.6 * 0.5)).abs() < 1e-7);
        assert_eq!(server.backward_calls(), &[1]);
        assert_eq!(server.state().unwrap().phase(), Phase::BackwardDone);
        assert!(server.backward_round().is_err());
        assert_eq!(server.backward_calls(), &[1]);
    }
}
