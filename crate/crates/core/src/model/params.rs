use std::collections::BTreeMap;

use std::path::Path;

use mpsl_tensor::{Gradients, Graph, Sgd, Tensor, Var};

use crate::error::{io_err, Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MPSLCKPT";

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// Graph leaves for the parameters of one store, created by [`ParamStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone());
        }
        out
    }

    /// Store with the trainable parameters only.
    pub fn trainable(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(_, t)| t.requires_grad()) {
            out.insert(n, t.clone());
        }
        out
    }

    /// Adds every entry of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    /// Overwrites the values of same-named parameters, keeping flags.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (n, t) in other.iter() {
            let dst = self
                .get_mut(n)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{n}`")))?;
            if dst.dims() != t.dims() {
                return Err(Error::Contract(format!(
                    "parameter `{n}` has dims {:?}, got {:?}",
                    dst.dims(),
                    t.dims()
                )));
            }
            dst.set_data(t.data())?;
        }
        Ok(())
    }

    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.dims() == b.dims() && a.dtype() == b.dtype())
    }

    /// Inserts every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.iter().map(|(n, t)| (n.to_string(), g.leaf(t))).collect();
        Bound { vars }
    }

    /// Adds the gradients of bound trainable parameters to their tensors.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, t) in self.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(&v) = bound.vars.get(name) else { continue };
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn step(&mut self, opt: &mut Sgd) -> Result<()> {
        opt.step(self.iter_mut())?;
        Ok(())
    }

    /// Elementwise weighted mean of structurally identical stores.
    pub fn weighted_average(stores: &[&ParamStore], weights: &[f64]) -> Result<ParamStore> {
        let first = *stores
            .first()
            .ok_or_else(|| Error::Contract("cannot average an empty list of models".into()))?;
        if stores.len() != weights.len() {
            return Err(Error::Contract(format!("{} models with {} weights", stores.len(), weights.len())));
        }
        for (i, s) in stores.iter().enumerate() {
            if !first.same_structure(s) {
                return Err(Error::Contract(format!("model {i} differs structurally from model 0")));
            }
        }
        let total: f64 = weights.iter().sum();
        let mut out = first.clone();
        for (k, t) in out.tensors.iter_mut().enumerate() {
            let mut acc = vec![0.0; t.numel()];
            for (s, w) in stores.iter().zip(weights) {
                for (a, x) in acc.iter_mut().zip(s.tensors[k].data()) {
                    *a += (w / total) * x;
                }
            }
            // Exact idempotence when every input is identical.
            if stores.iter().all(|s| s.tensors[k].data() == first.tensors[k].data()) {
                acc.copy_from_slice(first.tensors[k].data());
            }
            t.set_data(&acc)?;
            t.zero_grad();
        }
        Ok(out)
    }
}

impl ParamStore {
    /// Checkpoint encoding: magic, u32 count, then per parameter a u32
    /// name length, the UTF-8 name, a trainable flag byte and the wire
    /// tensor encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(t.requires_grad()));
            t.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
        let bad = |offset: usize, msg: &str| Error::Decode { offset, msg: format!("checkpoint: {msg}") };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad(0, "missing magic"));
        }
        let u32_at = |pos: usize| -> Result<usize> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| bad(pos, "truncated"))
        };
        let count = u32_at(8)?;
        let mut pos = 12;
        let mut out = ParamStore::new();
        for _ in 0..count {
            let len = u32_at(pos)?;
            pos += 4;
            let name = bytes
                .get(pos..pos + len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| bad(pos, "bad parameter name"))?
                .to_string();
            pos += len;
            let flag = *bytes.get(pos).ok_or_else(|| bad(pos, "truncated"))?;
            pos += 1;
            let (t, used) = Tensor::from_bytes(&bytes[pos..]).map_err(|e| bad(pos, &e.to_string()))?;
            pos += used;
            out.insert(name, t.with_requires_grad(flag == 1));
        }
        if pos != bytes.len() {
            return Err(bad(pos, "trailing bytes"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        ParamStore::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpsl_tensor::DType;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = store(0.25);
        s.insert("frozen", Tensor::full(&[1, 3], -1.5, DType::F32));
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert!(back.get("a").unwrap().requires_grad());
        assert!(!back.get("frozen").unwrap().requires_grad());
        let bytes = s.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[2], v, DType::F64).with_requires_grad(true));
        s
    }

    #[test]
    fn average_of_two() {
        let avg = ParamStore::weighted_average(&[&store(0.0), &store(2.0)], &[1.0, 1.0]).unwrap();
        assert_eq!(avg.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn average_is_idempotent() {
        let s = store(0.1);
        let avg = ParamStore::weighted_average(&[&s, &s, &s], &[3.0, 1.0, 7.0]).unwrap();
        assert_eq!(avg, s);
    }

    #[test]
    fn average_rejects_mismatch() {
        let mut other = store(1.0);
        other.insert("b", Tensor::zeros(&[1], DType::F64));
        assert!(matches!(
            ParamStore::weighted_average(&[&store(0.0), &other], &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }
}
