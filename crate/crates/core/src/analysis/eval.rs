use std::path::Path;

use mpsl_tensor::Graph;

use crate::analysis::cost::csv_err;
use crate::analysis::metrics::{accuracy, recall_at_k, Recall};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{classification_features, head_forward, server_predict, ServerOutput, SplitModel};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `accuracy` or `recall@1`.
    pub metric_name: &'static str,
    /// Accuracy, or recall@1 averaged over both retrieval directions.
    pub value: f64,
    pub recall: Option<Recall>,
}

/// Final embeddings of one modality (or `fused` for classification),
/// `rows × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub modality: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// Inference-only embeddings of `idx`, computed in chunks.
pub fn embeddings(model: &SplitModel, data: &Dataset, idx: &[usize]) -> Result<Vec<Embeddings>> {
    if idx.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    let cfg = &model.config;
    let mut out: Vec<Embeddings> = Vec::new();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new(0);
        let bound = model.params.bind(&mut g);
        let acts = head_forward(&mut g, cfg, &bound, &data.inputs(chunk))?;
        let parts: Vec<(String, mpsl_tensor::Var)> = if cfg.is_retrieval() {
            match server_predict(&mut g, cfg, &bound, &acts)? {
                ServerOutput::Retrieval { embeddings, .. } => cfg
                    .modalities
                    .iter()
                    .map(|m| m.to_string())
                    .zip(embeddings)
                    .collect(),
                ServerOutput::Logits(_) => unreachable!("retrieval config yields embeddings"),
            }
        } else {
            vec![("fused".to_string(), classification_features(&mut g, cfg, &bound, &acts)?)]
        };
        if out.is_empty() {
            out = parts
                .iter()
                .map(|(m, v)| Embeddings { modality: m.clone(), dim: g.dims(*v)[1], values: Vec::new() })
                .collect();
        }
        for (e, (_, v)) in out.iter_mut().zip(&parts) {
            e.values.extend_from_slice(g.value(*v).data());
        }
    }
    Ok(out)
}

/// Accuracy for classification, mean recall@1 for retrieval.
pub fn evaluate(model: &SplitModel, data: &Dataset, idx: &[usize]) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    let cfg = &model.config;
    if cfg.is_retrieval() {
        let emb = embeddings(model, data, idx)?;
        let (a, b) = (&emb[0], &emb[1]);
        let n = idx.len();
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            let ai = &a.values[i * a.dim..(i + 1) * a.dim];
            for j in 0..n {
                let bj = &b.values[j * b.dim..(j + 1) * b.dim];
                sim[i * n + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
            }
        }
        let r = recall_at_k(&sim, n, 1)?;
        return Ok(Evaluation { metric_name: "recall@1", value: r.mean(), recall: Some(r) });
    }
    let classes = cfg.num_classes().expect("classification task");
    let mut logits = Vec::with_capacity(idx.len() * classes);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new(0);
        let (_, out) = model.forward(&mut g, &data.inputs(chunk))?;
        logits.extend_from_slice(g.value(out.prediction()).data());
    }
    let value = accuracy(&logits, classes, &data.labels_of(idx))?;
    Ok(Evaluation { metric_name: "accuracy", value, recall: None })
}

/// One row per sample and modality: `sample_id, modality, e0..`.
pub fn export_embeddings(model: &SplitModel, data: &Dataset, idx: &[usize], path: &Path) -> Result<usize> {
    let emb = embeddings(model, data, idx)?;
    let dim = emb[0].dim;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["sample_id".to_string(), "modality".to_string()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut rows = 0;
    for (r, &sample) in idx.iter().enumerate() {
        for e in &emb {
            let mut rec = vec![sample.to_string(), e.modality.clone()];
            rec.extend(e.values[r * e.dim..(r + 1) * e.dim].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(crate::error::io_err(path))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub modality: String,
    pub values: Vec<f64>,
}

pub fn import_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| Error::Metric(format!("{}: bad {what} in embeddings row", path.display()));
        let sample_id = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("sample_id"))?;
        let modality = rec.get(1).ok_or_else(|| bad("modality"))?.to_string();
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRow { sample_id, modality, values });
    }
    Ok(out)
}
