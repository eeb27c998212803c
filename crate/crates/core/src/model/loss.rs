use mpsl_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let dims = g.dims(logits).to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(Error::Protocol(format!(
            "logits {dims:?} do not match a batch of {} labels",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= dims[1]) {
        return Err(Error::Data(format!("label {y} at position {i} outside [0, {})", dims[1])));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -1.0))
}

/// Symmetric InfoNCE over a `[B × B]` similarity matrix whose diagonal
/// holds the positive pairs.
pub fn info_nce(g: &mut Graph, sim: Var) -> Result<Var> {
    let dims = g.dims(sim).to_vec();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(Error::Protocol(format!("similarity matrix must be square, got {dims:?}")));
    }
    let b = dims[0];
    if b < 2 {
        return Err(Error::Data(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    let diag: Vec<usize> = (0..b).collect();
    let rows = cross_entropy(g, sim, &diag)?;
    let simt = g.permute(sim, &[1, 0])?;
    let cols = cross_entropy(g, simt, &diag)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Symmetric InfoNCE between two batches of unit embeddings at
/// temperature `tau`.
pub fn contrastive_loss(g: &mut Graph, emb_a: Var, emb_b: Var, tau: f64) -> Result<Var> {
    if g.dims(emb_a) != g.dims(emb_b) {
        return Err(Error::Protocol(format!(
            "embedding batches differ: {:?} vs {:?}",
            g.dims(emb_a),
            g.dims(emb_b)
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let bt = g.permute(emb_b, &[1, 0])?;
    let sim = g.matmul(emb_a, bt)?;
    let sim = g.scale(sim, 1.0 / tau);
    info_nce(g, sim)
}

/// `L_S = Σ (|B_n|/|B|)·L_Cn` over `(loss, |B_n|)` pairs, on the graph.
pub fn aggregate_losses(g: &mut Graph, losses: &[(Var, usize)]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::Protocol("cannot aggregate an empty list of client losses".into()));
    }
    if let Some(i) = losses.iter().position(|&(_, b)| b == 0) {
        return Err(Error::Protocol(format!("client loss {i} has an empty batch")));
    }
    let total: usize = losses.iter().map(|&(_, b)| b).sum();
    let vars: Vec<Var> = losses.iter().map(|&(v, _)| v).collect();
    let weights: Vec<f64> = losses.iter().map(|&(_, b)| b as f64 / total as f64).collect();
    Ok(g.weighted_sum(&vars, &weights)?)
}

/// A client's loss on a received prediction together with the gradient
/// of that loss with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Evaluates `L_Cn(ŷ, y)` locally: cross-entropy against `labels` for
/// logits, or symmetric InfoNCE for a retrieval similarity matrix.
pub fn client_loss(prediction: &Tensor, labels: Option<&[usize]>) -> Result<ClientLoss> {
    let mut g = Graph::new(0);
    let y = g.insert(prediction.clone().with_requires_grad(true));
    let loss = match labels {
        Some(labels) => cross_entropy(&mut g, y, labels)?,
        None => info_nce(&mut g, y)?,
    };
    let grads = g.backward(loss)?;
    Ok(ClientLoss {
        value: g.value(loss).item(),
        grad: grads.get(y).expect("prediction is differentiable").to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpsl_tensor::DType;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec(), DType::F64).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let mut g = Graph::new(0);
        let a = g.insert(t(&[], &[1.0]));
        let b = g.insert(t(&[], &[0.5]));
        let ls = aggregate_losses(&mut g, &[(a, 2), (b, 6)]).unwrap();
        assert_eq!(g.value(ls).item(), 0.625);
        let single = aggregate_losses(&mut g, &[(b, 3)]).unwrap();
        assert_eq!(g.value(single).item(), 0.5);
        assert!(matches!(aggregate_losses(&mut g, &[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let l = client_loss(&t(&[2, 4], &[0.0; 8]), Some(&[1, 3])).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let l = client_loss(&t(&[1, 3], &[0.0, 200.0, 0.0]), Some(&[1])).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        assert!(matches!(client_loss(&t(&[1, 3], &[0.0; 3]), Some(&[3])), Err(Error::Data(_))));
    }

    #[test]
    fn two_by_two_orthonormal() {
        let mut g = Graph::new(0);
        let a = g.insert(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.insert(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let l = contrastive_loss(&mut g, a, b, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_rows_give_ln_b() {
        let mut g = Graph::new(0);
        let row = [0.6, 0.8];
        let data: Vec<f64> = row.iter().cycle().take(10).cloned().collect();
        let a = g.insert(t(&[5, 2], &data));
        let b = g.insert(t(&[5, 2], &data));
        let l = contrastive_loss(&mut g, a, b, 0.07).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        assert!(matches!(client_loss(&t(&[1, 1], &[1.0]), None), Err(Error::Data(_))));
    }
}
