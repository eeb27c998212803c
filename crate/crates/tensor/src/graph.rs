//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order and backward simply walks them in reverse.
//! Values are owned by the graph; parameters enter as leaves copied from
//! [`Tensor`]s and their gradients are read back from [`Gradients`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, permute};
use crate::tensor::{numel, DType, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    MeanAxis { input: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Pick { input: Var, indices: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    L2Normalize { input: Var, norms: Vec<f64> },
    External { input: Var, grad: Vec<f64> },
    WeightedSum { inputs: Vec<Var>, weights: Vec<f64> },
    Dropout { input: Var, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Pick { .. } => "pick",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::External { .. } => "external",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradient buffers produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
    backward_calls: usize,
}

const TANH_GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const L2_EPS: f64 = 1e-12;

fn rows(dims: &[usize], op: &'static str) -> Result<(usize, usize)> {
    let n = *dims.last().ok_or_else(|| TensorError::InvalidShape {
        op,
        msg: "expected rank >= 1".into(),
    })?;
    let total = numel(dims);
    Ok((total.checked_div(n).unwrap_or(0), n))
}

/// Splits `dims` around `axis` into (outer, len, inner) extents.
fn axis_extents(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn sum_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    if inner == 0 {
        return out;
    }
    for chunk in g.chunks_exact(inner) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            backward_calls: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of backward passes executed on this graph.
    pub fn backward_calls(&self) -> usize {
        self.backward_calls
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, dims: Vec<usize>, mut data: Vec<f64>, dtype: DType, op: Op, requires_grad: bool) -> Var {
        dtype.round_slice(&mut data);
        let value = Tensor::new(dims, data, dtype).expect("op produced inconsistent buffer");
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dtype2(&self, op: &'static str, a: Var, b: Var) -> Result<DType> {
        let (da, db) = (self.value(a).dtype(), self.value(b).dtype());
        if da != db {
            return Err(TensorError::DTypeMismatch { op, lhs: da, rhs: db });
        }
        Ok(da)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf holding a copy of `t`; it participates in backward when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), t.dtype(), Op::Leaf, t.requires_grad())
    }

    /// Adds a leaf taking ownership of `t`.
    pub fn insert(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let (dims, dtype) = (t.dims().to_vec(), t.dtype());
        self.push(dims, t.into_data(), dtype, Op::Leaf, requires_grad)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.insert(t.with_requires_grad(false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let dtype = self.dtype2("add", a, b)?;
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.dims(a).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.dims(a).to_vec(), data, dtype, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s dims are a trailing suffix of `a`'s (bias and
    /// position-embedding broadcast).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let dtype = self.dtype2("add_broadcast", a, b)?;
        let (da, db) = (self.dims(a), self.dims(b));
        if db.len() > da.len() || da[da.len() - db.len()..] != *db {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: da.to_vec(),
                rhs: db.to_vec(),
            });
        }
        let inner = numel(db);
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % inner.max(1)])
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.dims(a).to_vec(), data, dtype, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dtype = self.dtype2("mul", a, b)?;
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.dims(a).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.dims(a).to_vec(), data, dtype, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let (dims, dtype, rg) = (t.dims().to_vec(), t.dtype(), self.rg(&[a]));
        self.push(dims, data, dtype, Op::Scale(a, c), rg)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let dtype = self.dtype2("mul_scalar", a, s)?;
        if self.value(s).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "mul_scalar",
                msg: format!("scale must have one element, got dims {:?}", self.dims(s)),
            });
        }
        let c = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(self.dims(a).to_vec(), data, dtype, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.exp()).collect();
        let (dims, dtype, rg) = (t.dims().to_vec(), t.dtype(), self.rg(&[a]));
        self.push(dims, data, dtype, Op::Exp(a), rg)
    }

    /// Matrix product `a[… × k] · b[k × n] → [… × n]`; leading dims of `a`
    /// are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dtype = self.dtype2("matmul", a, b)?;
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() < 2 || db.len() != 2 || da[da.len() - 1] != db[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: da, rhs: db });
        }
        let k = db[0];
        let n = db[1];
        let m = numel(&da) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut dims = da;
        *dims.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(dims, out, dtype, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `a[B×m×k] · b[B×k×n]`, or
    /// `a · bᵀ` with `b[B×n×k]` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let dtype = self.dtype2("bmm", a, b)?;
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let ok = da.len() == 3
            && db.len() == 3
            && da[0] == db[0]
            && if transpose_b { da[2] == db[2] } else { da[2] == db[1] };
        if !ok {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: da, rhs: db });
        }
        let (batch, m, k) = (da[0], da[1], da[2]);
        let n = if transpose_b { db[1] } else { db[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let a_i = &av[i * m * k..(i + 1) * m * k];
            let b_i = &bv[i * k * n..(i + 1) * k * n];
            let o_i = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(a_i, b_i, o_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, o_i, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, m, n], out, dtype, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        if numel(dims) != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.dims(a).to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let t = self.value(a);
        let (data, dtype, rg) = (t.data().to_vec(), t.dtype(), self.rg(&[a]));
        Ok(self.push(dims.to_vec(), data, dtype, Op::Reshape(a), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let mut seen = vec![false; dims.len()];
        let valid = perm.len() == dims.len()
            && perm.iter().all(|&p| p < dims.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", dims.len()),
            });
        }
        let (data, out_dims) = permute(self.value(a).data(), &dims, perm);
        let (dtype, rg) = (self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(out_dims, data, dtype, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Repeats `a` over new leading axes so that the result has `dims`;
    /// `a`'s dims must be a trailing suffix of `dims`.
    pub fn broadcast_to(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let da = self.dims(a);
        if da.len() > dims.len() || dims[dims.len() - da.len()..] != *da {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: da.to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let src = self.value(a).data();
        let reps = numel(dims) / src.len().max(1);
        let mut data = Vec::with_capacity(numel(dims));
        for _ in 0..reps {
            data.extend_from_slice(src);
        }
        let (dtype, rg) = (self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(dims.to_vec(), data, dtype, Op::BroadcastTo(a), rg))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, n) = rows(self.dims(a), "softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - m).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        let (dims, dtype, rg) = (self.dims(a).to_vec(), self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(dims, out, dtype, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, n) = rows(self.dims(a), "log_softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (oj, &xj) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *oj = xj - lse;
            }
        }
        let (dims, dtype, rg) = (self.dims(a).to_vec(), self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(dims, out, dtype, Op::LogSoftmax(a), rg))
    }

    /// Per-vector normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dtype = self.dtype2("layer_norm", x, gain)?;
        self.dtype2("layer_norm", x, bias)?;
        let (r, d) = rows(self.dims(x), "layer_norm")?;
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                msg: "normalized dimension is 0".into(),
            });
        }
        if self.dims(gain) != [d] || self.dims(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.dims(x).to_vec(),
                rhs: self.dims(gain).to_vec(),
            });
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let dims = self.dims(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(dims, out, dtype, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (TANH_GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let (dims, dtype, rg) = (t.dims().to_vec(), t.dtype(), self.rg(&[a]));
        self.push(dims, data, dtype, Op::Gelu(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let dtype = self.value(first).dtype();
        let mut total = 0;
        for (index, &v) in inputs.iter().enumerate() {
            self.dtype2("concat", first, v)?;
            let d = self.dims(v);
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ConcatMismatch {
                    index,
                    dims: d.to_vec(),
                    expected: base.clone(),
                    axis,
                });
            }
            total += d[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.dims(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(dims, out, dtype, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries of `a` along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {dims:?}", start + len),
            });
        }
        let (outer, full, inner) = axis_extents(&dims, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let (dtype, rg) = (self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(out_dims, out, dtype, Op::Slice { input: a, axis, start }, rg))
    }

    /// Mean over `axis`, which is removed from the output dims.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                msg: format!("axis {axis} out of range for {dims:?}"),
            });
        }
        if dims[axis] == 0 {
            return Err(TensorError::EmptySequence { op: "mean_axis" });
        }
        let (outer, len, inner) = axis_extents(&dims, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let row = &src[(o * len + t) * inner..(o * len + t + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        for x in out.iter_mut() {
            *x /= len as f64;
        }
        let mut out_dims = dims;
        out_dims.remove(axis);
        let (dtype, rg) = (self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(out_dims, out, dtype, Op::MeanAxis { input: a, axis }, rg))
    }

    /// Mean over the sequence axis of a `[batch × seq × d]` tensor.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x);
        if dims.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "global_average_pool",
                msg: format!("expected [batch, seq, d], got {dims:?}"),
            });
        }
        if dims[1] == 0 {
            return Err(TensorError::EmptySequence { op: "global_average_pool" });
        }
        self.mean_axis(x, 1)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum();
        let (dtype, rg) = (t.dtype(), self.rg(&[a]));
        self.push(vec![], vec![s], dtype, Op::Sum(a), rg)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(TensorError::EmptySequence { op: "mean" });
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let (dtype, rg) = (t.dtype(), self.rg(&[a]));
        Ok(self.push(vec![], vec![s], dtype, Op::Mean(a), rg))
    }

    /// Selects `a[i, indices[i]]` from a `[n × c]` tensor.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if dims.len() != 2 || dims[0] != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: dims,
                rhs: vec![indices.len()],
            });
        }
        let c = dims[1];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len());
        for (i, &j) in indices.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    size: c,
                    position: i,
                });
            }
            out.push(src[i * c + j]);
        }
        let (dtype, rg) = (self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(vec![indices.len()], out, dtype, Op::Pick { input: a, indices: indices.to_vec() }, rg))
    }

    /// Row lookup into a `[vocab × d]` table. The output has dims
    /// `lead ++ [d]` where `lead` multiplies out to `ids.len()`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let dims = self.dims(table).to_vec();
        if dims.len() != 2 || numel(lead) != ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: dims,
                rhs: lead.to_vec(),
            });
        }
        let (vocab, d) = (dims[0], dims[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    size: vocab,
                    position,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut out_dims = lead.to_vec();
        out_dims.push(d);
        let (dtype, rg) = (self.value(table).dtype(), self.rg(&[table]));
        Ok(self.push(out_dims, out, dtype, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, n) = rows(self.dims(a), "l2_normalize")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * n];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPS);
            norms[i] = norm;
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        let (dims, dtype, rg) = (self.dims(a).to_vec(), self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(dims, out, dtype, Op::L2Normalize { input: a, norms }, rg))
    }

    /// A scalar whose value and derivative with respect to `input` were
    /// computed elsewhere: the node evaluates to `value` and backward
    /// propagates `upstream · grad` into `input`.
    pub fn external(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "external",
                lhs: self.dims(input).to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let (dtype, rg) = (self.value(input).dtype(), self.rg(&[input]));
        Ok(self.push(vec![], vec![value], dtype, Op::External { input, grad }, rg))
    }

    /// `Σ weights[i] · inputs[i]` over single-element inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        if inputs.is_empty() || inputs.len() != weights.len() {
            return Err(TensorError::InvalidShape {
                op: "weighted_sum",
                msg: format!("{} inputs with {} weights", inputs.len(), weights.len()),
            });
        }
        let dtype = self.value(inputs[0]).dtype();
        let mut acc = 0.0;
        for (&v, &w) in inputs.iter().zip(weights) {
            self.dtype2("weighted_sum", inputs[0], v)?;
            if self.value(v).numel() != 1 {
                return Err(TensorError::InvalidShape {
                    op: "weighted_sum",
                    msg: format!("input has dims {:?}, expected a scalar", self.dims(v)),
                });
            }
            acc += w * self.value(v).data()[0];
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            vec![],
            vec![acc],
            dtype,
            Op::WeightedSum { inputs: inputs.to_vec(), weights: weights.to_vec() },
            rg,
        ))
    }

    /// Inverted dropout with keep-probability `1 - p`. The mask is drawn
    /// from the graph seed and node position, so replays are bit-identical.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        let n = self.value(a).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.nodes.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (dims, dtype, rg) = (self.dims(a).to_vec(), self.value(a).dtype(), self.rg(&[a]));
        Ok(self.push(dims, data, dtype, Op::Dropout { input: a, mask }, rg))
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Backpropagates from arbitrary nodes seeded with explicit upstream
    /// gradients (e.g. a cut-layer gradient received over the wire).
    pub fn backward_from(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(TensorError::Contract(format!("seed node {} not in this graph", v.0)));
            }
            if g.len() != self.value(*v).numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    lhs: self.dims(*v).to_vec(),
                    rhs: vec![g.len()],
                });
            }
            self.accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0);
        }
        self.backward_calls += 1;
        if seeds.is_empty() {
            return Ok(Gradients { grads });
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, mut contrib: Vec<f64>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let dtype = node.value.dtype();
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contrib) {
                    *a = dtype.round(*a + c);
                }
            }
            slot @ None => {
                dtype.round_slice(&mut contrib);
                *slot = Some(contrib);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let inner = self.value(*b).numel();
                    self.accumulate(grads, *b, sum_leading(g, inner));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).data()[0];
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
                }
                if self.wants(*s) {
                    let ds = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.iter().zip(y).map(|(x, e)| x * e).collect());
            }
            Op::MatMul(a, b) => {
                let db = self.dims(*b);
                let (k, n) = (db[0], db[1]);
                let m = self.value(*a).numel() / k.max(1);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut dbv = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), g, &mut dbv, k, m, n);
                    self.accumulate(grads, *b, dbv);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let da_dims = self.dims(*a);
                let (batch, m, k) = (da_dims[0], da_dims[1], da_dims[2]);
                let n = node.value.dims()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = &bv[t * k * n..(t + 1) * k * n];
                        let o = &mut da[t * m * k..(t + 1) * m * k];
                        if *transpose_b {
                            gemm_nn(g_t, b_t, o, m, n, k);
                        } else {
                            gemm_nt(g_t, b_t, o, m, n, k);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut dbv = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &av[t * m * k..(t + 1) * m * k];
                        let o = &mut dbv[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            gemm_tn(g_t, a_t, o, n, m, k);
                        } else {
                            gemm_tn(a_t, g_t, o, k, m, n);
                        }
                    }
                    self.accumulate(grads, *b, dbv);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute(g, node.value.dims(), &inv);
                self.accumulate(grads, *a, back);
            }
            Op::BroadcastTo(a) => {
                let inner = self.value(*a).numel();
                self.accumulate(grads, *a, sum_leading(g, inner));
            }
            Op::Softmax(a) => {
                let n = *node.value.dims().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gj), yj) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yj * (gj - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let n = *node.value.dims().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gj), yj) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gj - yj.exp() * total;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.value.dims().last().unwrap();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, sum_leading(g, d));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let df = d as f64;
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] = rstd[r] / df * (df * dh - s1 - hr[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gj, &x)| {
                        let u = TANH_GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = TANH_GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gj * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.dims(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.dims(v)[*axis];
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = axis_extents(self.dims(*input), *axis);
                let len = node.value.dims()[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = axis_extents(self.dims(*input), *axis);
                let mut dx = vec![0.0; outer * len * inner];
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for t in 0..len {
                        let base = (o * len + t) * inner;
                        for (d, gj) in dx[base..base + inner].iter_mut().zip(gr) {
                            *d = gj * scale;
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Pick { input, indices } => {
                let c = self.dims(*input)[1];
                let mut dx = vec![0.0; indices.len() * c];
                for (i, &j) in indices.iter().enumerate() {
                    dx[i * c + j] = g[i];
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GatherRows { table, ids } => {
                let d = self.dims(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, gj) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += gj;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::L2Normalize { input, norms } => {
                let n = *node.value.dims().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for (r, ((gr, yr), dr)) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gj), yj) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (gj - yj * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::External { input, grad } => {
                self.accumulate(grads, *input, grad.iter().map(|x| x * g[0]).collect());
            }
            Op::WeightedSum { inputs, weights } => {
                for (&v, &w) in inputs.iter().zip(weights) {
                    self.accumulate(grads, v, vec![w * g[0]]);
                }
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g.iter().zip(mask).map(|(x, m)| x * m).collect());
            }
        }
    }
}
