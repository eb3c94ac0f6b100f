//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the value type: a row-major buffer plus a shape, with an
//! optional gradient buffer for parameters. Differentiable computation runs
//! on a [`Tape`], which records every operation and replays adjoints in
//! reverse with [`Tape::backward`]. Execution is single-threaded per tape
//! and bit-deterministic: the same inputs always produce the same tape,
//! values, and gradients.

mod tape;

pub use tape::{Tape, VarId};

use crate::{Error, Result};

/// Dense rank-N array of f32 values in row-major order.
///
/// `grad` is present exactly when `requires_grad` is set; parameters start
/// with a zeroed gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Parameter(format!(
                "tensor shape {:?} implies {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    /// Builds a rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Parameter(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Marks this tensor as a trainable parameter, allocating its gradient
    /// buffer.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Parameter(format!("expected rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Copies row indices out of a rank-2 tensor into a new batch.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Parameter(format!("row index {} out of range (rows {})", i, rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), cols], data)
    }

    /// Zeroes the gradient buffer (keeps it allocated).
    pub fn clear_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw little-endian bytes of the value buffer; used for determinism and
    /// frozen-parameter checks.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// One vanilla SGD update: `theta <- theta - lr * grad(theta)`, then clears
/// the gradients. Every parameter must carry a populated gradient buffer.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be > 0, got {}", lr)));
    }
    for p in params.iter() {
        if p.grad.is_none() {
            return Err(Error::Invariant("sgd_step: parameter is missing its gradient".into()));
        }
    }
    for p in params.iter_mut() {
        let g = p.grad.as_mut().expect("checked above");
        for (w, gi) in p.data.iter_mut().zip(g.iter_mut()) {
            *w -= lr * *gi;
            *gi = 0.0;
        }
    }
    Ok(())
}

/// FNV-1a over the value bytes of a parameter list; order-sensitive.
/// Cheap fingerprint for frozen-parameter and determinism assertions.
pub fn fingerprint<'a, I: IntoIterator<Item = &'a Tensor>>(params: I) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params {
        for d in &t.shape {
            for b in (*d as u64).to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100_0000_01b3);
            }
        }
        for v in &t.data {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    hash
}
