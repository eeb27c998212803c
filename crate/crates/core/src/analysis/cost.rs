use std::path::Path;

use mpsl_tensor::{encoded_len, DType};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{activation_dims, prediction_dims, Modality, ModelConfig, Preset, Task};
use crate::transport::{BYTES_PER_MB, HEADER_LEN};

/// Encoded size of a `Loss` frame: header, f32 value, u32 count.
pub const LOSS_FRAME_BYTES: usize = HEADER_LEN + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mpsl,
    FedAvg,
    FedClip,
    Centralized,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mpsl => "mpsl",
            Method::FedAvg => "fedavg",
            Method::FedClip => "fedclip",
            Method::Centralized => "centralized",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "mpsl" => Ok(Method::Mpsl),
            "fedavg" => Ok(Method::FedAvg),
            "fedclip" => Ok(Method::FedClip),
            "centralized" => Ok(Method::Centralized),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected mpsl, fedavg, fedclip or centralized)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// Shape and trainability of one parameter tensor, derived from the
/// configuration alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Every parameter of the split model in initialization order, without
/// allocating it.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut out = Vec::new();
    let mut put = |name: String, dims: Vec<usize>, trainable: bool| out.push(ParamSpec { name, dims, trainable });
    let head_rg = !cfg.freeze_tokenizers;
    for &m in &cfg.modalities {
        let pre = format!("head.{m}");
        match m {
            Modality::Text => put(format!("{pre}.table"), vec![cfg.vocab_size, d], head_rg && cfg.train_token_table),
            _ => {
                put(format!("{pre}.proj"), vec![cfg.patch_dim(m), d], head_rg);
                put(format!("{pre}.bias"), vec![d], head_rg);
            }
        }
        put(format!("{pre}.cls"), vec![d], head_rg);
        put(format!("{pre}.pos"), vec![cfg.seq_len(m), d], head_rg);
    }
    let h = cfg.mlp_dim();
    for i in 0..cfg.depth {
        let rg = i >= cfg.freeze_first_k;
        let pre = format!("body.{i}");
        put(format!("{pre}.ln1.gain"), vec![d], rg);
        put(format!("{pre}.ln1.bias"), vec![d], rg);
        for w in ["q", "k", "v", "o"] {
            put(format!("{pre}.w{w}"), vec![d, d], rg);
            put(format!("{pre}.b{w}"), vec![d], rg);
        }
        put(format!("{pre}.ln2.gain"), vec![d], rg);
        put(format!("{pre}.ln2.bias"), vec![d], rg);
        put(format!("{pre}.w1"), vec![d, h], rg);
        put(format!("{pre}.b1"), vec![h], rg);
        put(format!("{pre}.w2"), vec![h, d], rg);
        put(format!("{pre}.b2"), vec![d], rg);
    }
    put("tail.norm.gain".into(), vec![d], true);
    put("tail.norm.bias".into(), vec![d], true);
    match cfg.task {
        Task::Classification { num_classes } => {
            put("tail.head.weight".into(), vec![d, num_classes], true);
            put("tail.head.bias".into(), vec![num_classes], true);
        }
        Task::Retrieval { proj_dim } => {
            for &m in &cfg.modalities {
                put(format!("tail.proj.{m}"), vec![d, proj_dim], true);
            }
            put("tail.logit_scale".into(), vec![], true);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub head: usize,
    pub head_trainable: usize,
    pub server: usize,
    pub server_trainable: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.head + self.server
    }

    pub fn trainable(&self) -> usize {
        self.head_trainable + self.server_trainable
    }
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let mut c = ParamCounts::default();
    for p in param_specs(cfg) {
        let n = p.numel();
        if p.name.starts_with("head.") {
            c.head += n;
            c.head_trainable += if p.trainable { n } else { 0 };
        } else {
            c.server += n;
            c.server_trainable += if p.trainable { n } else { 0 };
        }
    }
    c
}

/// FedCLIP's trainable adapter: one `d × d` linear layer with bias per
/// modality on top of a frozen backbone.
pub fn fedclip_adapter_params(cfg: &ModelConfig) -> usize {
    cfg.modalities.len() * (cfg.embed_dim * cfg.embed_dim + cfg.embed_dim)
}

/// Trainable parameters held by one client.
pub fn client_trainable_params(cfg: &ModelConfig, method: Method) -> usize {
    let c = param_counts(cfg);
    match method {
        Method::Mpsl => c.head_trainable,
        Method::FedAvg | Method::Centralized => c.trainable(),
        Method::FedClip => fedclip_adapter_params(cfg),
    }
}

/// Forward FLOPs of one tokenizer per input: `patches · 2 · patch_dim · d`;
/// a text lookup costs nothing.
pub fn tokenizer_flops(cfg: &ModelConfig, m: Modality) -> f64 {
    match m {
        Modality::Text => 0.0,
        _ => cfg.patches(m) as f64 * 2.0 * cfg.patch_dim(m) as f64 * cfg.embed_dim as f64,
    }
}

/// Forward FLOPs of one encoder block on a sequence of `s` tokens:
/// attention `8sd² + 4s²d` plus MLP `4·s·d·mlp_dim` (`16sd²` at ratio 4).
pub fn block_flops(s: usize, d: usize, mlp_dim: usize) -> f64 {
    let (s, d, h) = (s as f64, d as f64, mlp_dim as f64);
    8.0 * s * d * d + 4.0 * s * s * d + 4.0 * s * d * h
}

fn encoder_sequences(cfg: &ModelConfig) -> Vec<usize> {
    match cfg.fusion {
        crate::model::Fusion::Early => vec![cfg.total_seq()],
        crate::model::Fusion::Late => cfg.modalities.iter().map(|&m| cfg.seq_len(m)).collect(),
    }
}

fn tail_flops(cfg: &ModelConfig) -> f64 {
    let d = cfg.embed_dim as f64;
    match cfg.task {
        Task::Classification { num_classes } => 2.0 * d * num_classes as f64,
        Task::Retrieval { proj_dim } => cfg.modalities.len() as f64 * 2.0 * d * proj_dim as f64,
    }
}

/// Client-side tokenizer forward plus backward on trainable tokenizers.
fn head_train_flops(cfg: &ModelConfig) -> f64 {
    let mult = if cfg.freeze_tokenizers { 1.0 } else { 3.0 };
    cfg.modalities.iter().map(|&m| tokenizer_flops(cfg, m) * mult).sum()
}

/// Body and tail forward plus backward (2× forward) on trainable blocks and
/// the tail.
fn server_train_flops(cfg: &ModelConfig) -> f64 {
    let mut f = 0.0;
    for s in encoder_sequences(cfg) {
        let b = block_flops(s, cfg.embed_dim, cfg.mlp_dim());
        for i in 0..cfg.depth {
            f += if i >= cfg.freeze_first_k { 3.0 * b } else { b };
        }
    }
    f + 3.0 * tail_flops(cfg)
}

fn forward_flops(cfg: &ModelConfig) -> f64 {
    let tok: f64 = cfg.modalities.iter().map(|&m| tokenizer_flops(cfg, m)).sum();
    let body: f64 = encoder_sequences(cfg)
        .into_iter()
        .map(|s| cfg.depth as f64 * block_flops(s, cfg.embed_dim, cfg.mlp_dim()))
        .sum();
    tok + body + tail_flops(cfg)
}

/// Training FLOPs per input (1 multiply-accumulate = 2 FLOPs).
pub fn flops_model(cfg: &ModelConfig, role: Role, method: Method) -> f64 {
    match (method, role) {
        (Method::Mpsl, Role::Client) => head_train_flops(cfg),
        (Method::Mpsl, Role::Server) => server_train_flops(cfg),
        (Method::FedAvg | Method::Centralized, Role::Client) => head_train_flops(cfg) + server_train_flops(cfg),
        (Method::FedClip, Role::Client) => {
            let d = cfg.embed_dim as f64;
            forward_flops(cfg) + 3.0 * cfg.modalities.len() as f64 * 2.0 * d * d
        }
        (Method::FedAvg | Method::Centralized | Method::FedClip, Role::Server) => 0.0,
    }
}

/// Workload assumptions behind a communication estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CommScenario {
    /// Per-client mini-batch sizes `|B_n|`.
    pub client_batches: Vec<usize>,
    /// Text tokens per sample (excluding cls).
    pub text_tokens: usize,
    /// Wire precision of transmitted tensors.
    pub wire: DType,
}

impl CommScenario {
    pub fn new(client_batches: Vec<usize>, text_tokens: usize) -> Self {
        Self { client_batches, text_tokens, wire: DType::F32 }
    }

    /// One client with the default full-scale workload: `|D_n| = 200`,
    /// `|B_n| = 4`, i.e. 50 MPSL rounds per epoch and one FedAvg round
    /// per epoch.
    pub fn reference(cfg: &ModelConfig) -> Self {
        Self::new(vec![REFERENCE_CLIENT_BATCH], cfg.text_len)
    }
}

pub const REFERENCE_SHARD: usize = 200;
pub const REFERENCE_CLIENT_BATCH: usize = 4;

/// Rounds per epoch of each method in the full-scale scenario.
pub fn reference_rounds_per_epoch(method: Method) -> f64 {
    match method {
        Method::Mpsl => (REFERENCE_SHARD / REFERENCE_CLIENT_BATCH) as f64,
        _ => 1.0,
    }
}

/// Exact per-round frame bytes for each client, plus per-epoch averages.
#[derive(Clone, Debug, PartialEq)]
pub struct CommCost {
    /// `(uplink, downlink)` bytes per round for each client.
    pub per_client: Vec<(u64, u64)>,
    pub up_mb_per_epoch: f64,
    pub down_mb_per_epoch: f64,
}

impl CommCost {
    pub fn combined_mb_per_epoch(&self) -> f64 {
        self.up_mb_per_epoch + self.down_mb_per_epoch
    }

    /// Total bytes for `rounds` rounds over all clients.
    pub fn total(&self, rounds: u64) -> (u64, u64) {
        let up: u64 = self.per_client.iter().map(|c| c.0).sum();
        let down: u64 = self.per_client.iter().map(|c| c.1).sum();
        (up * rounds, down * rounds)
    }
}

fn tensor_bytes(dims: &[usize], wire: DType) -> u64 {
    encoded_len(dims, wire) as u64
}

/// Per-client communication per round and MB per epoch.
pub fn comm_model(cfg: &ModelConfig, method: Method, scenario: &CommScenario, rounds_per_epoch: f64) -> Result<CommCost> {
    if scenario.client_batches.is_empty() {
        return Err(Error::Config("communication scenario has no clients".into()));
    }
    let w = scenario.wire;
    let header = HEADER_LEN as u64;
    let per_client: Vec<(u64, u64)> = match method {
        Method::Mpsl => scenario
            .client_batches
            .iter()
            .map(|&b| {
                let acts: u64 = activation_dims(cfg, b, scenario.text_tokens)
                    .iter()
                    .map(|d| tensor_bytes(d, w))
                    .sum();
                let pred = tensor_bytes(&prediction_dims(cfg, b), w);
                let up = (header + acts) + LOSS_FRAME_BYTES as u64 + (header + pred);
                let down = (header + pred) + (header + acts);
                (up, down)
            })
            .collect(),
        Method::FedAvg => {
            let params: u64 = param_specs(cfg)
                .iter()
                .filter(|p| p.trainable)
                .map(|p| tensor_bytes(&p.dims, w))
                .sum();
            let down = header + params;
            let up = down + LOSS_FRAME_BYTES as u64;
            vec![(up, down); scenario.client_batches.len()]
        }
        Method::FedClip => {
            let bytes = (w.size_bytes() * fedclip_adapter_params(cfg)) as u64;
            vec![(bytes, bytes); scenario.client_batches.len()]
        }
        Method::Centralized => vec![(0, 0); scenario.client_batches.len()],
    };
    let n = per_client.len() as f64;
    let mean = |f: fn(&(u64, u64)) -> u64| per_client.iter().map(f).sum::<u64>() as f64 / n;
    Ok(CommCost {
        up_mb_per_epoch: mean(|c| c.0) * rounds_per_epoch / BYTES_PER_MB,
        down_mb_per_epoch: mean(|c| c.1) * rounds_per_epoch / BYTES_PER_MB,
        per_client,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: Method,
    pub preset: String,
    pub client_params: usize,
    pub client_gflops: f64,
    pub server_gflops: f64,
    pub up_mb_per_epoch: f64,
    pub down_mb_per_epoch: f64,
}

/// One row per `(preset, method)` at full scale, in preset-major order.
pub fn cost_report(presets: &[Preset], methods: &[Method]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::with_capacity(presets.len() * methods.len());
    for &p in presets {
        let cfg = ModelConfig::full_scale(p).resolved()?;
        for &m in methods {
            rows.push(cost_row(&cfg, p.name(), m, &CommScenario::reference(&cfg), reference_rounds_per_epoch(m))?);
        }
    }
    Ok(rows)
}

pub fn cost_row(cfg: &ModelConfig, preset: &str, method: Method, scenario: &CommScenario, rounds_per_epoch: f64) -> Result<CostRow> {
    let comm = comm_model(cfg, method, scenario, rounds_per_epoch)?;
    Ok(CostRow {
        method,
        preset: preset.to_string(),
        client_params: client_trainable_params(cfg, method),
        client_gflops: flops_model(cfg, Role::Client, method) / 1e9,
        server_gflops: flops_model(cfg, Role::Server, method) / 1e9,
        up_mb_per_epoch: comm.up_mb_per_epoch,
        down_mb_per_epoch: comm.down_mb_per_epoch,
    })
}

pub fn write_cost_csv(path: &Path, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SplitModel;

    #[test]
    fn specs_match_initialized_model() {
        let cfg = ModelConfig { freeze_first_k: 1, train_token_table: false, ..Default::default() };
        let model = SplitModel::init(&cfg).unwrap();
        let specs = param_specs(&model.config);
        assert_eq!(specs.len(), model.params.len());
        for (s, (n, t)) in specs.iter().zip(model.params.iter()) {
            assert_eq!(s.name, n);
            assert_eq!(s.dims, t.dims());
            assert_eq!(s.trainable, t.requires_grad());
        }
        let c = param_counts(&model.config);
        assert_eq!(c.total(), model.params.num_elements());
        assert_eq!(c.trainable(), model.params.trainable_elements());
    }

    #[test]
    fn toy_block_matches_hand_count() {
        // d=8, seq=5, mlp 32: q,k,v,o projections 4·(5·8·8) MACs, scores
        // 5·5·8, context 5·5·8, MLP 2·(5·8·32) MACs.
        let macs = 4 * 5 * 8 * 8 + 5 * 5 * 8 + 5 * 5 * 8 + 2 * 5 * 8 * 32;
        assert_eq!(block_flops(5, 8, 32), 2.0 * macs as f64);
    }

    #[test]
    fn frozen_everything_has_no_backward() {
        let mut cfg = ModelConfig::default();
        cfg.freeze_first_k = cfg.depth;
        cfg.freeze_tokenizers = true;
        let fwd = flops_model(&cfg, Role::Client, Method::Mpsl);
        let toks: f64 = cfg.modalities.iter().map(|&m| tokenizer_flops(&cfg, m)).sum();
        assert_eq!(fwd, toks);
        let server = flops_model(&cfg, Role::Server, Method::Mpsl);
        let blocks = cfg.depth as f64 * block_flops(cfg.total_seq(), cfg.embed_dim, cfg.mlp_dim());
        assert_eq!(server, blocks + 3.0 * tail_flops(&cfg));
    }

    #[test]
    fn mpsl_comm_is_depth_independent() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.depth = 7;
        let s = CommScenario::new(vec![3, 2], a.text_len);
        assert_eq!(comm_model(&a, Method::Mpsl, &s, 1.0).unwrap(), comm_model(&b, Method::Mpsl, &s, 1.0).unwrap());
    }

    #[test]
    fn unknown_method_is_config_error() {
        assert!(matches!(Method::parse("fedprox"), Err(Error::Config(_))));
    }
}
