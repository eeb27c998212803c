use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crate::analysis::{evaluate, MetricLog, MetricRecord};
use crate::error::{Error, Result};
use crate::model::{ParamStore, Reassembly, SplitModel};
use crate::protocol::{ClientMachine, Federation, MpslClient, MpslServer};
use crate::transport::{
    channel_pair, tcp_listen, ByteLedger, ChannelEndpoint, Endpoint, Frame, FrameRecorder, Message, Tapped,
    TcpEndpoint,
};

/// Server-side handle on one client connection.
pub trait Link: Endpoint {
    /// The client's current parameters when it runs in-process.
    fn observe(&self) -> Option<ParamStore> {
        None
    }
}

impl Link for ChannelEndpoint {}
impl Link for TcpEndpoint {}

/// An in-process client driven synchronously by the server's sends, so a
/// run is a single deterministic thread of control. Frames still pass
/// through the encoder and decoder.
pub struct LocalLink<C> {
    client: C,
    outbox: VecDeque<Vec<u8>>,
}

impl<C: ClientMachine> LocalLink<C> {
    pub fn new(mut client: C) -> Result<Self> {
        let outbox = client.start()?.iter().map(Frame::encode).collect();
        Ok(LocalLink { client, outbox })
    }

    pub fn client(&self) -> &C {
        &self.client
    }
}

impl<C: ClientMachine> Endpoint for LocalLink<C> {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let frame = Frame::decode(bytes)?;
        for out in self.client.handle(frame)? {
            self.outbox.push_back(out.encode());
        }
        Ok(())
    }

    fn recv_bytes(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        match (self.outbox.pop_front(), timeout) {
            (Some(b), _) => Ok(Some(b)),
            (None, Some(_)) => Ok(None),
            (None, None) => Err(Error::Transport(format!("client {} has nothing to send", self.client.id()))),
        }
    }
}

impl<C: ClientMachine> Link for LocalLink<C> {
    fn observe(&self) -> Option<ParamStore> {
        Some(self.client.params().clone())
    }
}

/// Runs a client against a server endpoint until it finishes. A local
/// failure is reported to the server with `Abort` before it is returned.
pub fn run_client<C: ClientMachine + ?Sized, E: Endpoint + ?Sized>(client: &mut C, ep: &mut E) -> Result<()> {
    for f in client.start()? {
        ep.send(&f)?;
    }
    while !client.finished() {
        let frame = ep.recv()?;
        let round = frame.round;
        match client.handle(frame) {
            Ok(out) => {
                for f in out {
                    ep.send(&f)?;
                }
            }
            Err(e) => {
                let _ = ep.send(&Frame::new(round, client.id(), Message::Abort(e.to_string())));
                return Err(e);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep a copy of every frame seen by the server.
    pub record: bool,
    /// Receive timeout per frame; `None` blocks.
    pub timeout: Option<Duration>,
    /// Record wall-clock milliseconds per round (otherwise 0).
    pub wall_clock: bool,
    /// `(client, round)` pairs at which in-process clients drop their loss
    /// once.
    pub fail: Vec<(u32, u32)>,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainedArtifacts {
    pub method: &'static str,
    pub model: crate::model::ModelConfig,
    /// Server part `F_S`, or the full model for single-model methods.
    pub server: ParamStore,
    /// Final client heads `F_Cn` (empty for single-model methods).
    pub heads: Vec<ParamStore>,
    pub shard_sizes: Vec<usize>,
    pub log: MetricLog,
    pub ledger: ByteLedger,
    pub recorder: Option<FrameRecorder>,
    /// Server backward invocations per round.
    pub backward_calls: Vec<usize>,
}

impl TrainedArtifacts {
    /// A standalone model: per-client or `|D_n|`-weighted head.
    pub fn reassemble(&self, mode: Reassembly) -> Result<SplitModel> {
        if self.heads.is_empty() {
            return Ok(SplitModel { config: self.model.clone(), params: self.server.clone() });
        }
        let heads: Vec<(&ParamStore, usize)> = self.heads.iter().zip(self.shard_sizes.iter().copied()).collect();
        SplitModel::reassemble(&self.model, mode, &heads, &self.server)
    }
}

pub(crate) type ServerLink = Tapped<Box<dyn Link>>;

/// Reads each link's `Register` frame and orders the links by client id,
/// which must be exactly `0..N`.
pub(crate) fn register_links(
    links: Vec<Box<dyn Link>>,
    n: usize,
    timeout: Option<Duration>,
    ledger: &ByteLedger,
    recorder: Option<&FrameRecorder>,
) -> Result<Vec<ServerLink>> {
    if links.len() != n {
        return Err(Error::Protocol(format!("{} connections for {n} clients", links.len())));
    }
    let mut registered = Vec::with_capacity(n);
    for mut link in links {
        let bytes = link
            .recv_bytes(timeout)?
            .ok_or_else(|| Error::Transport("timed out waiting for Register".into()))?;
        let f = Frame::decode(&bytes)?;
        if f.message != Message::Register || f.round != 0 {
            return Err(Error::Protocol(format!("expected Register, got {:?}", f.msg_type())));
        }
        registered.push((f.client_id, link, bytes));
    }
    registered.sort_by_key(|r| r.0);
    let mut out = Vec::with_capacity(n);
    for (k, (id, link, bytes)) in registered.into_iter().enumerate() {
        if id as usize != k {
            return Err(Error::Protocol(format!("unexpected or duplicate client id {id} at registration")));
        }
        let t = Tapped::new(link, id, ledger.clone(), recorder.cloned());
        t.note_received(&bytes)?;
        out.push(t);
    }
    Ok(out)
}

pub(crate) fn recv(link: &mut ServerLink, timeout: Option<Duration>) -> Result<Frame> {
    match timeout {
        None => link.recv(),
        Some(t) => link.recv_timeout(t)?.ok_or_else(|| {
            Error::Transport(format!("client {} timed out", link.link()))
        }),
    }
}

fn unexpected(f: &Frame, want: &str) -> Error {
    Error::Protocol(format!(
        "client {} sent {:?} for round {} while the server expected {want}",
        f.client_id,
        f.msg_type(),
        f.round
    ))
}

/// Collects the heads pushed after training and fills them into the
/// initial head structure.
pub(crate) fn collect_pushes(
    links: &mut [ServerLink],
    round: u32,
    template: &ParamStore,
    timeout: Option<Duration>,
) -> Result<Vec<ParamStore>> {
    let mut heads = Vec::with_capacity(links.len());
    for link in links.iter_mut() {
        let f = recv(link, timeout)?;
        match f.message {
            Message::ModelPush(ts) if f.round == round => heads.push(fill_trainable(template, ts)?),
            _ => return Err(unexpected(&f, "ModelPush")),
        }
    }
    Ok(heads)
}

/// Copies `values` into the trainable tensors of `template`, in order.
pub(crate) fn fill_trainable(template: &ParamStore, values: Vec<mpsl_tensor::Tensor>) -> Result<ParamStore> {
    let mut out = template.clone();
    let mut it = values.into_iter();
    for (name, t) in out.iter_mut().filter(|(_, t)| t.requires_grad()) {
        let v = it
            .next()
            .ok_or_else(|| Error::Protocol(format!("model upload is missing `{name}`")))?;
        if v.dims() != t.dims() {
            return Err(Error::Protocol(format!(
                "model upload `{name}` has dims {:?}, expected {:?}",
                v.dims(),
                t.dims()
            )));
        }
        t.set_data(v.data())?;
    }
    if it.next().is_some() {
        return Err(Error::Protocol("model upload carries extra tensors".into()));
    }
    Ok(out)
}

fn eval_record(fed: &Federation, model: &SplitModel) -> Result<(String, Option<f64>)> {
    if fed.data.test.is_empty() {
        return Ok((String::new(), None));
    }
    let e = evaluate(model, &fed.data, &fed.data.test)?;
    Ok((e.metric_name.to_string(), Some(e.value)))
}

enum Attempt {
    Done(crate::protocol::RoundResult),
    Missing(Vec<u32>),
}

fn mpsl_round(server: &mut MpslServer, links: &mut [ServerLink], r: u32, timeout: Option<Duration>) -> Result<Attempt> {
    server.begin_round(r);
    let mut aborted = Vec::new();
    for link in links.iter_mut() {
        let f = recv(link, timeout)?;
        match f.message {
            Message::Activations(ts) if f.round == r => {
                let pred = server.on_activations(f.client_id, r, ts)?;
                link.send(&Frame::new(r, f.client_id, Message::Prediction(pred)))?;
            }
            Message::Abort(_) if f.round == r => aborted.push(f.client_id),
            _ => return Err(unexpected(&f, "Activations")),
        }
    }
    for link in links.iter_mut() {
        if aborted.contains(&link.link()) {
            continue;
        }
        let f = recv(link, timeout)?;
        match f.message {
            Message::Loss { value, count } if f.round == r => server.on_loss(f.client_id, r, value, count)?,
            Message::Abort(_) if f.round == r => {
                aborted.push(f.client_id);
                continue;
            }
            _ => return Err(unexpected(&f, "Loss")),
        }
        let f = recv(link, timeout)?;
        match f.message {
            Message::CutGrad(mut ts) if f.round == r && ts.len() == 1 => {
                server.on_output_grad(f.client_id, r, ts.remove(0))?
            }
            _ => return Err(unexpected(&f, "the output gradient")),
        }
    }
    match server.backward_round() {
        Ok(res) => Ok(Attempt::Done(res)),
        Err(Error::Barrier { missing, .. }) => Ok(Attempt::Missing(missing)),
        Err(e) => Err(e),
    }
}

/// Runs the MPSL server over already-connected links (any transport).
pub fn serve_mpsl(fed: &Federation, init: &SplitModel, links: Vec<Box<dyn Link>>, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let tc = &fed.training;
    let ledger = ByteLedger::new();
    let recorder = opts.record.then(FrameRecorder::new);
    let mut links = register_links(links, fed.num_clients(), opts.timeout, &ledger, recorder.as_ref())?;
    let ids: Vec<u32> = (0..fed.num_clients() as u32).collect();
    let mut server = MpslServer::new(&fed.model, init.server(), tc.server_lr, tc.momentum, ids);
    let template = init.head();
    let mut log = MetricLog::new();
    let mut pending_record: Option<MetricRecord> = None;
    for r in 1..=tc.rounds {
        let start = Instant::now();
        let mut attempt = 0;
        let result = loop {
            match mpsl_round(&mut server, &mut links, r, opts.timeout)? {
                Attempt::Done(res) => break res,
                Attempt::Missing(missing) => {
                    log::warn!("round {r}: no loss from clients {missing:?}; aborting round");
                    if attempt >= tc.max_retries {
                        return Err(Error::Barrier { round: r, missing });
                    }
                    attempt += 1;
                    for link in links.iter_mut() {
                        let id = link.link();
                        link.send(&Frame::new(r, id, Message::Abort(format!("round {r} aborted: missing {missing:?}"))))?;
                    }
                }
            }
        };
        for (c, ts) in result.cut_grads {
            links[c as usize].send(&Frame::new(r, c, Message::CutGrad(ts)))?;
        }
        ledger.complete_round(r);
        let evaluate_now = tc.eval_every > 0 && r % tc.eval_every == 0;
        let observed: Option<Vec<ParamStore>> = links.iter().map(|l| l.inner().observe()).collect();
        let (metric_name, metric_value) = match (evaluate_now, observed) {
            (true, Some(heads)) => {
                let art = artifacts(fed, &server, heads, MetricLog::new(), &ledger, None);
                eval_record(fed, &art.reassemble(Reassembly::FedAvg)?)?
            }
            _ => (String::new(), None),
        };
        let (up, down) = ledger.round_bytes(r);
        if let Some(rec) = pending_record.take() {
            log.push(rec)?;
        }
        pending_record = Some(MetricRecord {
            round: r,
            method: "mpsl".into(),
            loss: result.loss,
            metric_name,
            metric_value,
            up_bytes: up,
            down_bytes: down,
            wall_ms: if opts.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
        });
    }
    let heads = collect_pushes(&mut links, tc.rounds + 1, &template, opts.timeout)?;
    let mut art = artifacts(fed, &server, heads, MetricLog::new(), &ledger, recorder);
    if let Some(mut rec) = pending_record.take() {
        if rec.metric_value.is_none() {
            (rec.metric_name, rec.metric_value) = eval_record(fed, &art.reassemble(Reassembly::FedAvg)?)?;
        }
        log.push(rec)?;
    }
    art.log = log;
    Ok(art)
}

fn artifacts(
    fed: &Federation,
    server: &MpslServer,
    heads: Vec<ParamStore>,
    log: MetricLog,
    ledger: &ByteLedger,
    recorder: Option<FrameRecorder>,
) -> TrainedArtifacts {
    TrainedArtifacts {
        method: "mpsl",
        model: fed.model.clone(),
        server: server.params().clone(),
        heads,
        shard_sizes: fed.shard_sizes(),
        log,
        ledger: ledger.clone(),
        recorder,
        backward_calls: server.backward_calls().to_vec(),
    }
}

fn clients(fed: &Federation, init: &SplitModel, opts: &RunOptions) -> Result<Vec<MpslClient>> {
    (0..fed.num_clients() as u32)
        .map(|n| {
            let mut c = MpslClient::new(fed, n, init.head())?;
            for &(_, r) in opts.fail.iter().filter(|(c, _)| *c == n) {
                c = c.fail_at(r);
            }
            Ok(c)
        })
        .collect()
}

/// Single-threaded deterministic run with in-process clients.
pub fn run_mpsl_sequential(fed: &Federation, init: &SplitModel, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let links = clients(fed, init, opts)?
        .into_iter()
        .map(|c| Ok(Box::new(LocalLink::new(c)?) as Box<dyn Link>))
        .collect::<Result<Vec<_>>>()?;
    serve_mpsl(fed, init, links, opts)
}

/// Each client on its own thread, connected by in-process channels.
pub fn run_mpsl_threaded(fed: &Federation, init: &SplitModel, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let cs = clients(fed, init, opts)?;
    std::thread::scope(|s| {
        let mut links: Vec<Box<dyn Link>> = Vec::new();
        let mut handles = Vec::new();
        for mut c in cs {
            let (server_end, mut client_end) = channel_pair();
            links.push(Box::new(server_end));
            handles.push(s.spawn(move || run_client(&mut c, &mut client_end)));
        }
        let out = serve_mpsl(fed, init, links, opts);
        join_clients(handles, out)
    })
}

/// Each client on its own thread, connected over loopback TCP.
pub fn run_mpsl_tcp(fed: &Federation, init: &SplitModel, addr: &str, opts: &RunOptions) -> Result<TrainedArtifacts> {
    let listener = tcp_listen(addr)?;
    let local = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?.to_string();
    let cs = clients(fed, init, opts)?;
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for mut c in cs {
            let local = local.clone();
            handles.push(s.spawn(move || {
                let mut ep = TcpEndpoint::connect(&local, Duration::from_secs(10))?;
                run_client(&mut c, &mut ep)
            }));
        }
        let out = accept_links(&listener, fed.num_clients()).and_then(|links| serve_mpsl(fed, init, links, opts));
        join_clients(handles, out)
    })
}

/// Accepts `n` TCP connections as server links.
pub fn accept_links(listener: &std::net::TcpListener, n: usize) -> Result<Vec<Box<dyn Link>>> {
    (0..n)
        .map(|_| {
            let (stream, _) = listener.accept().map_err(|e| Error::Transport(format!("accept: {e}")))?;
            Ok(Box::new(TcpEndpoint::new(stream)?) as Box<dyn Link>)
        })
        .collect()
}

pub(crate) fn join_clients<T>(
    handles: Vec<std::thread::ScopedJoinHandle<'_, Result<()>>>,
    server: Result<T>,
) -> Result<T> {
    let mut client_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => client_err = client_err.or(Some(e)),
            Err(_) => client_err = client_err.or(Some(Error::Transport("client thread panicked".into()))),
        }
    }
    match (server, client_err) {
        (Ok(v), None) => Ok(v),
        (Ok(_), Some(e)) => Err(e),
        (Err(e), _) => Err(e),
    }
}
