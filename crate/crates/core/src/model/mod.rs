//! The split multimodal transformer `W = [W_h; W_b; W_t]`.
//!
//! Parameters live in a [`ParamStore`] under three name prefixes: `head.`
//! (per-modality tokenizers, held by clients), `body.` (encoder blocks) and
//! `tail.` (final norm and task projection), the latter two held by the
//! server. Forward functions take a [`Bound`] view of whichever stores the
//! caller has placed on its graph, so the same code runs monolithically or
//! split across client and server graphs.

mod checkpoint;
mod config;
mod loss;
mod params;
pub mod tokenizer;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Fusion, LateSummary, Modality, ModelConfig, Precision, Preset, Task};
pub use loss::{aggregate_losses, client_loss, contrastive_loss, cross_entropy, info_nce, ClientLoss};
pub use params::{Bound, ParamStore};

use mpsl_tensor::{DType, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use tokenizer::{patchify, Spectrogram};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Raw inputs for a batch, one flat buffer per modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inputs {
    pub size: usize,
    /// `[size × image_size × image_size × image_channels]`
    pub vision: Option<Vec<f64>>,
    /// `[size × audio_len]`
    pub audio: Option<Vec<f64>>,
    /// `[size × text_tokens]` token ids.
    pub text: Option<Vec<usize>>,
    pub text_tokens: usize,
}

impl Inputs {
    fn modality(&self, m: Modality) -> bool {
        match m {
            Modality::Vision => self.vision.is_some(),
            Modality::Audio => self.audio.is_some(),
            Modality::Text => self.text.is_some(),
        }
    }
}

/// Client output at the cut layer: one fused sequence, or one sequence per
/// modality in config order.
#[derive(Clone, Debug, PartialEq)]
pub enum Activations {
    Early(Var),
    Late(Vec<Var>),
}

impl Activations {
    pub fn vars(&self) -> Vec<Var> {
        match self {
            Activations::Early(v) => vec![*v],
            Activations::Late(vs) => vs.clone(),
        }
    }
}

/// Server output: classification logits `[B × C]`, or per-modality unit
/// embeddings plus the scaled similarity matrix `[B × B]` for retrieval.
#[derive(Clone, Debug, PartialEq)]
pub enum ServerOutput {
    Logits(Var),
    Retrieval { embeddings: Vec<Var>, similarity: Var },
}

impl ServerOutput {
    /// The tensor returned to the client as the prediction.
    pub fn prediction(&self) -> Var {
        match self {
            ServerOutput::Logits(v) => *v,
            ServerOutput::Retrieval { similarity, .. } => *similarity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reassembly {
    PerClient(usize),
    FedAvg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    dtype: DType,
}

impl Init {
    fn trunc_normal(&mut self, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let x = self.normal.sample(&mut self.rng);
                if x.abs() <= 2.0 * INIT_STD {
                    break x;
                }
            })
            .collect();
        Tensor::new(dims.to_vec(), data, self.dtype).expect("dims match")
    }

    fn zeros(&self, dims: &[usize]) -> Tensor {
        Tensor::zeros(dims, self.dtype)
    }

    fn ones(&self, dims: &[usize]) -> Tensor {
        Tensor::ones(dims, self.dtype)
    }
}

impl SplitModel {
    /// Initializes every parameter from `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<SplitModel> {
        let cfg = config.resolved()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
            dtype: cfg.dtype(),
        };
        let d = cfg.embed_dim;
        let mut p = ParamStore::new();
        let head_rg = !cfg.freeze_tokenizers;
        for &m in &cfg.modalities {
            let pre = format!("head.{m}");
            match m {
                Modality::Text => {
                    p.insert(
                        format!("{pre}.table"),
                        init.trunc_normal(&[cfg.vocab_size, d])
                            .with_requires_grad(head_rg && cfg.train_token_table),
                    );
                }
                _ => {
                    p.insert(
                        format!("{pre}.proj"),
                        init.trunc_normal(&[cfg.patch_dim(m), d]).with_requires_grad(head_rg),
                    );
                    p.insert(format!("{pre}.bias"), init.zeros(&[d]).with_requires_grad(head_rg));
                }
            }
            p.insert(format!("{pre}.cls"), init.trunc_normal(&[d]).with_requires_grad(head_rg));
            p.insert(
                format!("{pre}.pos"),
                init.trunc_normal(&[cfg.seq_len(m), d]).with_requires_grad(head_rg),
            );
        }
        let h = cfg.mlp_dim();
        for i in 0..cfg.depth {
            let rg = i >= cfg.freeze_first_k;
            let pre = format!("body.{i}");
            let mut put = |name: &str, t: Tensor| p.insert(format!("{pre}.{name}"), t.with_requires_grad(rg));
            put("ln1.gain", init.ones(&[d]));
            put("ln1.bias", init.zeros(&[d]));
            for w in ["q", "k", "v", "o"] {
                put(&format!("w{w}"), init.trunc_normal(&[d, d]));
                put(&format!("b{w}"), init.zeros(&[d]));
            }
            put("ln2.gain", init.ones(&[d]));
            put("ln2.bias", init.zeros(&[d]));
            put("w1", init.trunc_normal(&[d, h]));
            put("b1", init.zeros(&[h]));
            put("w2", init.trunc_normal(&[h, d]));
            put("b2", init.zeros(&[d]));
        }
        p.insert("tail.norm.gain", init.ones(&[d]).with_requires_grad(true));
        p.insert("tail.norm.bias", init.zeros(&[d]).with_requires_grad(true));
        match cfg.task {
            Task::Classification { num_classes } => {
                p.insert("tail.head.weight", init.trunc_normal(&[d, num_classes]).with_requires_grad(true));
                p.insert("tail.head.bias", init.zeros(&[num_classes]).with_requires_grad(true));
            }
            Task::Retrieval { proj_dim } => {
                for &m in &cfg.modalities {
                    p.insert(
                        format!("tail.proj.{m}"),
                        init.trunc_normal(&[d, proj_dim]).with_requires_grad(true),
                    );
                }
                p.insert(
                    "tail.logit_scale",
                    Tensor::scalar((1.0f64 / 0.07).ln(), cfg.dtype()).with_requires_grad(true),
                );
            }
        }
        Ok(SplitModel { config: cfg, params: p })
    }

    /// Client-side parameters `F_C = W_h`.
    pub fn head(&self) -> ParamStore {
        self.params.subset("head.")
    }

    /// Server-side parameters `F_S = [W_b; W_t]`.
    pub fn server(&self) -> ParamStore {
        let mut s = self.params.subset("body.");
        s.merge(&self.params.subset("tail."));
        s
    }

    pub fn from_parts(config: &ModelConfig, head: &ParamStore, server: &ParamStore) -> SplitModel {
        let mut params = head.clone();
        params.merge(server);
        SplitModel { config: config.clone(), params }
    }

    /// Builds a standalone model from client heads and the server part:
    /// one client's head, or the `|D_n|`-weighted mean of all heads.
    pub fn reassemble(
        config: &ModelConfig,
        mode: Reassembly,
        heads: &[(&ParamStore, usize)],
        server: &ParamStore,
    ) -> Result<SplitModel> {
        let head = match mode {
            Reassembly::PerClient(n) => heads
                .get(n)
                .map(|(h, _)| (*h).clone())
                .ok_or_else(|| Error::Contract(format!("no head for client {n}")))?,
            Reassembly::FedAvg => {
                let stores: Vec<&ParamStore> = heads.iter().map(|(h, _)| *h).collect();
                let weights: Vec<f64> = heads.iter().map(|&(_, n)| n as f64).collect();
                ParamStore::weighted_average(&stores, &weights)?
            }
        };
        Ok(SplitModel::from_parts(config, &head, server))
    }

    /// Monolithic forward through head, body and tail on one graph.
    pub fn forward(&self, g: &mut Graph, inputs: &Inputs) -> Result<(Bound, ServerOutput)> {
        let bound = self.params.bind(g);
        let acts = head_forward(g, &self.config, &bound, inputs)?;
        let out = server_predict(g, &self.config, &bound, &acts)?;
        Ok((bound, out))
    }
}

/// Token sequence `[B × seq × d]` for one modality.
pub fn tokenize(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, m: Modality, inputs: &Inputs) -> Result<Var> {
    let b = inputs.size;
    let d = cfg.embed_dim;
    let dtype = cfg.dtype();
    let pre = format!("head.{m}");
    let patches = match m {
        Modality::Vision => {
            let raw = inputs
                .vision
                .as_ref()
                .ok_or_else(|| Error::Protocol("vision input missing".into()))?;
            let n = cfg.image_size;
            let data = patchify(raw, b, n, n, cfg.image_channels, cfg.patch_size)?;
            Some(Tensor::new(vec![b, cfg.patches(m), cfg.patch_dim(m)], data, dtype)?)
        }
        Modality::Audio => {
            let raw = inputs
                .audio
                .as_ref()
                .ok_or_else(|| Error::Protocol("audio input missing".into()))?;
            if b == 0 || raw.len() % b != 0 {
                return Err(Error::Data(format!("{} audio samples do not split into {b} signals", raw.len())));
            }
            let len = raw.len() / b;
            if len != cfg.audio_len {
                return Err(Error::Data(format!("audio length {len}, expected {}", cfg.audio_len)));
            }
            let spec = Spectrogram::new(cfg.audio_frame, cfg.audio_hop);
            let width = cfg.audio_frames_padded();
            let mut images = Vec::with_capacity(b * spec.bins() * width);
            for s in raw.chunks(len) {
                images.extend(spec.compute(s, width)?);
            }
            let data = patchify(&images, b, spec.bins(), width, 1, cfg.patch_size)?;
            Some(Tensor::new(vec![b, cfg.patches(m), cfg.patch_dim(m)], data, dtype)?)
        }
        Modality::Text => None,
    };
    let tokens = match patches {
        Some(t) => {
            let x = g.constant(t);
            let proj = g.matmul(x, bound.get(&format!("{pre}.proj"))?)?;
            g.add_broadcast(proj, bound.get(&format!("{pre}.bias"))?)?
        }
        None => {
            let ids = inputs
                .text
                .as_ref()
                .ok_or_else(|| Error::Protocol("text input missing".into()))?;
            let len = inputs.text_tokens;
            if len > cfg.text_len || ids.len() != b * len {
                return Err(Error::Data(format!(
                    "text batch holds {} ids for {b} sequences of {len} tokens (max {})",
                    ids.len(),
                    cfg.text_len
                )));
            }
            if let Some((i, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {id} at index {i} is outside the vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            g.gather_rows(bound.get(&format!("{pre}.table"))?, ids, &[b, len])?
        }
    };
    let seq = g.dims(tokens)[1] + 1;
    let cls = g.broadcast_to(bound.get(&format!("{pre}.cls"))?, &[b, 1, d])?;
    let x = g.concat(&[cls, tokens], 1)?;
    let mut pos = bound.get(&format!("{pre}.pos"))?;
    if g.dims(pos)[0] != seq {
        pos = g.slice(pos, 0, 0, seq)?;
    }
    Ok(g.add_broadcast(x, pos)?)
}

/// Client forward `a_n`: early fusion concatenates the modality
/// sequences along the token axis, late fusion keeps them separate.
pub fn head_forward(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, inputs: &Inputs) -> Result<Activations> {
    let mut seqs = Vec::with_capacity(cfg.modalities.len());
    for &m in &cfg.modalities {
        if !inputs.modality(m) {
            return Err(Error::Protocol(format!("configured modality `{m}` missing from the batch")));
        }
        seqs.push(tokenize(g, cfg, bound, m, inputs)?);
    }
    Ok(match cfg.fusion {
        Fusion::Early if seqs.len() == 1 => Activations::Early(seqs[0]),
        Fusion::Early => Activations::Early(g.concat(&seqs, 1)?),
        Fusion::Late => Activations::Late(seqs),
    })
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_broadcast(y, b)?)
}

fn attention(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, pre: &str, x: Var) -> Result<Var> {
    let dims = g.dims(x).to_vec();
    let (b, s, d) = (dims[0], dims[1], dims[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let split = |g: &mut Graph, name: &str| -> Result<Var> {
        let y = linear(g, x, bound.get(&format!("{pre}.w{name}"))?, bound.get(&format!("{pre}.b{name}"))?)?;
        let y = g.reshape(y, &[b, s, h, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(y, &[b * h, s, dh])?)
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = g.softmax(scores)?;
    let ctx = g.bmm(att, v, false)?;
    let ctx = g.reshape(ctx, &[b, h, s, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, s, d])?;
    linear(g, ctx, bound.get(&format!("{pre}.wo"))?, bound.get(&format!("{pre}.bo"))?)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
fn block(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, i: usize, x: Var) -> Result<Var> {
    let pre = format!("body.{i}");
    let p = |n: &str| bound.get(&format!("{pre}.{n}"));
    let n1 = g.layer_norm(x, p("ln1.gain")?, p("ln1.bias")?, LN_EPS)?;
    let a = attention(g, cfg, bound, &pre, n1)?;
    let h = g.add(x, a)?;
    let n2 = g.layer_norm(h, p("ln2.gain")?, p("ln2.bias")?, LN_EPS)?;
    let m = linear(g, n2, p("w1")?, p("b1")?)?;
    let m = g.gelu(m);
    let m = linear(g, m, p("w2")?, p("b2")?)?;
    Ok(g.add(h, m)?)
}

/// The body `W_b`: `depth` shape-preserving blocks over `[B × seq × d]`.
pub fn encoder_forward(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, x: Var) -> Result<Var> {
    let dims = g.dims(x);
    if dims.len() != 3 || dims[2] != cfg.embed_dim {
        return Err(Error::Tensor(mpsl_tensor::TensorError::ShapeMismatch {
            op: "encoder_forward",
            lhs: dims.to_vec(),
            rhs: vec![cfg.embed_dim],
        }));
    }
    let mut h = x;
    for i in 0..cfg.depth {
        h = block(g, cfg, bound, i, h)?;
    }
    Ok(h)
}

fn summarize(g: &mut Graph, cfg: &ModelConfig, encoded: Var) -> Result<Var> {
    match cfg.late_summary {
        LateSummary::Tokens => Ok(encoded),
        LateSummary::Cls => Ok(g.slice(encoded, 1, 0, 1)?),
    }
}

fn tail_norm(g: &mut Graph, bound: &Bound, pooled: Var) -> Result<Var> {
    Ok(g.layer_norm(pooled, bound.get("tail.norm.gain")?, bound.get("tail.norm.bias")?, LN_EPS)?)
}

/// Pooled, normalized features feeding the classification head.
pub fn classification_features(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, acts: &Activations) -> Result<Var> {
    let pooled = match (cfg.fusion, acts) {
        (Fusion::Early, Activations::Early(a)) => {
            let enc = encoder_forward(g, cfg, bound, *a)?;
            g.global_average_pool(enc)?
        }
        (Fusion::Late, Activations::Late(parts)) => {
            check_parts(cfg, parts)?;
            let mut summaries = Vec::with_capacity(parts.len());
            for &a in parts {
                let enc = encoder_forward(g, cfg, bound, a)?;
                summaries.push(summarize(g, cfg, enc)?);
            }
            let joined = if summaries.len() == 1 { summaries[0] } else { g.concat(&summaries, 1)? };
            g.global_average_pool(joined)?
        }
        _ => {
            return Err(Error::Protocol(format!(
                "activations do not match {:?} fusion",
                cfg.fusion
            )))
        }
    };
    tail_norm(g, bound, pooled)
}

/// Server prediction `ŷ`.
pub fn server_predict(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, acts: &Activations) -> Result<ServerOutput> {
    match (&cfg.task, cfg.fusion, acts) {
        (Task::Classification { .. }, _, _) => {
            let n = classification_features(g, cfg, bound, acts)?;
            let logits = linear(g, n, bound.get("tail.head.weight")?, bound.get("tail.head.bias")?)?;
            Ok(ServerOutput::Logits(logits))
        }
        (Task::Retrieval { .. }, Fusion::Late, Activations::Late(parts)) => {
            check_parts(cfg, parts)?;
            let mut embeddings = Vec::with_capacity(parts.len());
            for (&m, &a) in cfg.modalities.iter().zip(parts) {
                let enc = encoder_forward(g, cfg, bound, a)?;
                let s = summarize(g, cfg, enc)?;
                let pooled = g.global_average_pool(s)?;
                let n = tail_norm(g, bound, pooled)?;
                let z = g.matmul(n, bound.get(&format!("tail.proj.{m}"))?)?;
                embeddings.push(g.l2_normalize(z)?);
            }
            let bt = g.permute(embeddings[1], &[1, 0])?;
            let cos = g.matmul(embeddings[0], bt)?;
            let scale = g.exp(bound.get("tail.logit_scale")?);
            let similarity = g.mul_scalar(cos, scale)?;
            Ok(ServerOutput::Retrieval { embeddings, similarity })
        }
        _ => Err(Error::Protocol(format!(
            "activations do not match {:?} fusion for this task",
            cfg.fusion
        ))),
    }
}

fn check_parts(cfg: &ModelConfig, parts: &[Var]) -> Result<()> {
    if parts.len() != cfg.modalities.len() {
        return Err(Error::Protocol(format!(
            "late fusion expects {} modality sequences, got {}",
            cfg.modalities.len(),
            parts.len()
        )));
    }
    Ok(())
}

/// Expected activation tensor dims for a batch of `b` samples.
pub fn activation_dims(cfg: &ModelConfig, b: usize, text_tokens: usize) -> Vec<Vec<usize>> {
    let seq = |m: Modality| match m {
        Modality::Text => text_tokens + 1,
        _ => cfg.seq_len(m),
    };
    match cfg.fusion {
        Fusion::Early => vec![vec![b, cfg.modalities.iter().map(|&m| seq(m)).sum(), cfg.embed_dim]],
        Fusion::Late => cfg.modalities.iter().map(|&m| vec![b, seq(m), cfg.embed_dim]).collect(),
    }
}

/// Prediction tensor dims for a batch of `b` samples.
pub fn prediction_dims(cfg: &ModelConfig, b: usize) -> Vec<usize> {
    match cfg.task {
        Task::Classification { num_classes } => vec![b, num_classes],
        Task::Retrieval { .. } => vec![b, b],
    }
}
