use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← m·v + g`, `p ← p − lr·v`. Gradients are consumed by each step.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Drops all momentum buffers.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates every trainable tensor. Frozen tensors are skipped; a
    /// trainable tensor without an accumulated gradient is an error.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let mut pending = Vec::new();
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            if t.grad().is_none() {
                return Err(TensorError::Contract(format!(
                    "parameter `{name}` is trainable but has no gradient"
                )));
            }
            pending.push((name, t));
        }
        for (name, t) in pending {
            let g = t.take_grad().expect("checked above");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let dtype = t.dtype();
            for ((vi, gi), p) in v.iter_mut().zip(&g).zip(t.data_mut()) {
                *vi = dtype.round(self.momentum * *vi + gi);
                *p = dtype.round(*p - self.lr * *vi);
            }
        }
        Ok(())
    }
}
