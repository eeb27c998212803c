use crate::error::{Result, TensorError};

/// Scalar precision of a tensor.
///
/// Values are held as `f64` internally; `F32` tensors are rounded to single
/// precision after every operation so that arithmetic results match a native
/// `f32` evaluation of each elementwise step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub(crate) fn round_slice(self, v: &mut [f64]) {
        if self == DType::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Dense row-major tensor.
///
/// A `Tensor` is a plain value container. Gradient storage lives alongside the
/// data so that parameter tensors can accumulate gradients across several
/// backward passes until an optimizer step consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if numel(&dims) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                msg: format!("dims {:?} hold {} values, got {}", dims, numel(&dims), data.len()),
            });
        }
        dtype.round_slice(&mut data);
        Ok(Self {
            dims,
            dtype,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Self {
        Self::full(dims, 0.0, dtype)
    }

    pub fn ones(dims: &[usize], dtype: DType) -> Self {
        Self::full(dims, 1.0, dtype)
    }

    pub fn full(dims: &[usize], value: f64, dtype: DType) -> Self {
        Self {
            dims: dims.to_vec(),
            dtype,
            data: vec![dtype.round(value); numel(dims)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(&[], value, dtype)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers writing `F32` tensors must
    /// store single-precision-representable values; [`Tensor::set_data`]
    /// does the rounding for you.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn set_data(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(TensorError::InvalidShape {
                op: "set_data",
                msg: format!("expected {} values, got {}", self.data.len(), data.len()),
            });
        }
        self.data.copy_from_slice(data);
        self.dtype.round_slice(&mut self.data);
        Ok(())
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.dims.clone(),
                rhs: vec![g.len()],
            });
        }
        let dtype = self.dtype;
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = dtype.round(*a + b);
                }
            }
            None => {
                let mut v = g.to_vec();
                dtype.round_slice(&mut v);
                self.grad = Some(v);
            }
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        if numel(dims) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.dims.clone(),
                rhs: dims.to_vec(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        let mut data = self.data.clone();
        dtype.round_slice(&mut data);
        Tensor {
            dims: self.dims.clone(),
            dtype,
            data,
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Largest absolute elementwise difference; `None` when dims differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Size in bytes of the wire encoding produced by [`Tensor::write_bytes`].
    pub fn encoded_len(&self) -> usize {
        encoded_len(&self.dims, self.dtype)
    }

    /// Appends the wire encoding: dtype tag, rank, u32 LE dims, LE scalars.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        assert!(self.dims.len() <= u8::MAX as usize, "rank exceeds wire limit");
        out.reserve(self.encoded_len());
        out.push(self.dtype.tag());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).expect("dimension exceeds u32 wire limit");
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            DType::F32 => {
                for &x in &self.data {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &x in &self.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_bytes(&mut out);
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let err = |offset: usize, msg: String| TensorError::Decode { offset, msg };
        if bytes.len() < 2 {
            return Err(err(bytes.len(), "truncated tensor header".into()));
        }
        let dtype = DType::from_tag(bytes[0])
            .ok_or_else(|| err(0, format!("unknown dtype tag {}", bytes[0])))?;
        let rank = bytes[1] as usize;
        let mut pos = 2;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| err(bytes.len(), "truncated tensor dims".into()))?;
            dims.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
            pos += 4;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| err(2, "element count overflows".into()))?;
        let width = dtype.size_bytes();
        let payload = n
            .checked_mul(width)
            .ok_or_else(|| err(2, "payload size overflows".into()))?;
        let body = bytes
            .get(pos..pos + payload)
            .ok_or_else(|| err(bytes.len(), format!("truncated tensor data: need {payload} bytes")))?;
        let data: Vec<f64> = match dtype {
            DType::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        pos += payload;
        Ok((
            Tensor {
                dims,
                dtype,
                data,
                requires_grad: false,
                grad: None,
            },
            pos,
        ))
    }
}

/// Wire size of a tensor with the given dims and dtype.
pub fn encoded_len(dims: &[usize], dtype: DType) -> usize {
    2 + 4 * dims.len() + numel(dims) * dtype.size_bytes()
}
