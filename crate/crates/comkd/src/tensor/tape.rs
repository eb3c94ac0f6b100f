use crate::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Recorded operation, holding input ids and whatever forward state the
/// adjoint needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    // the input id is provenance for debugging; no adjoint flows through
    Detach {
        #[allow(dead_code)]
        a: usize,
    },
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Scale { a: usize, factor: f32 },
    ScaleVar { a: usize, s: usize },
    Transpose { a: usize },
    ConcatCols { a: usize, b: usize },
    RepeatRow { v: usize },
    Relu { a: usize },
    Abs { a: usize },
    RowSoftmax { a: usize, inv_tau: f32 },
    LogRowSoftmax { a: usize, inv_tau: f32, probs: Vec<f32> },
    L2NormalizeRows { a: usize, norms: Vec<f32> },
    ReduceMeanRows { a: usize },
    ReduceVarRows { a: usize, mean: Vec<f32> },
    RowSum { a: usize },
    MeanAll { a: usize },
    SumAll { a: usize },
    SelectClass { a: usize, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    needs_grad: bool,
    op: Op,
}

/// Wengert list for reverse-mode differentiation.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// reverse execution order exactly once, accumulating adjoints for every
/// node that (transitively) depends on a gradient-carrying leaf. Gradients
/// persist on the tape and accumulate across repeated `backward` calls until
/// [`Tape::clear_grads`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, needs_grad: bool, op: Op) -> VarId {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op
        );
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, needs_grad, op });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    /// Records a tensor as an input; gradients flow iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records a tensor that never receives gradient (frozen input).
    pub fn constant(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Constant)
    }

    pub fn scalar(&mut self, value: f32) -> VarId {
        self.push(vec![1], vec![value], false, Op::Constant)
    }

    /// Copies a value while cutting it out of the gradient flow.
    pub fn detach(&mut self, a: VarId) -> VarId {
        let shape = self.nodes[a.0].shape.clone();
        let value = self.nodes[a.0].value.clone();
        self.push(shape, value, false, Op::Detach { a: a.0 })
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: VarId) -> &[f32] {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated for `id`, if any backward pass reached it.
    pub fn grad(&self, id: VarId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Copies a recorded value out as a plain tensor.
    pub fn to_tensor(&self, id: VarId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Adds the tape gradient of `id` (zeros if none) into `param.grad`.
    pub fn accumulate_grad_into(&self, id: VarId, param: &mut Tensor) -> Result<()> {
        if param.data.len() != self.nodes[id.0].value.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad_into",
                left: param.shape.clone(),
                right: self.nodes[id.0].shape.clone(),
            });
        }
        let grad = param
            .grad
            .as_mut()
            .ok_or_else(|| Error::Invariant("accumulate_grad_into: tensor has no grad buffer".into()))?;
        if let Some(g) = &self.grads[id.0] {
            for (dst, src) in grad.iter_mut().zip(g.iter()) {
                *dst += *src;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn dims2(&self, op: &'static str, id: VarId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension { op, left: other.to_vec(), right: vec![0, 0] }),
        }
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary_needs_grad(&self, a: VarId, b: VarId) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    // ── forward operations ──────────────────────────────────────────────

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let ng = self.binary_needs_grad(a, b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.binary_needs_grad(a, b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, ng, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.binary_needs_grad(a, b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, ng, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.binary_needs_grad(a, b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, ng, Op::Mul { a: a.0, b: b.0 }))
    }

    /// `[B,d] + [d]` broadcast over rows (bias add).
    pub fn add_row(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2("add_row", a)?;
        if self.nodes[bias.0].shape != [cols] {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        let bv = &self.nodes[bias.0].value;
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] += bv[c];
            }
        }
        let ng = self.binary_needs_grad(a, bias);
        Ok(self.push(vec![rows, cols], value, ng, Op::AddRow { a: a.0, bias: bias.0 }))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: VarId, factor: f32) -> VarId {
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(shape, value, ng, Op::Scale { a: a.0, factor })
    }

    /// Multiplies by a single-element variable (the learnable gate path).
    pub fn scale_var(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::Parameter(format!(
                "scale_var: scale must have exactly 1 element, got shape {:?}",
                self.nodes[s.0].shape
            )));
        }
        let sv = self.nodes[s.0].value[0];
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.binary_needs_grad(a, s);
        Ok(self.push(shape, value, ng, Op::ScaleVar { a: a.0, s: s.0 }))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2("transpose", a)?;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = av[r * cols + c];
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![cols, rows], value, ng, Op::Transpose { a: a.0 }))
    }

    /// `[B,c1] | [B,c2] -> [B,c1+c2]`, appending `b`'s columns to `a`'s rows.
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut value = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            value.extend_from_slice(&self.nodes[a.0].value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&self.nodes[b.0].value[r * cb..(r + 1) * cb]);
        }
        let ng = self.binary_needs_grad(a, b);
        Ok(self.push(vec![ra, ca + cb], value, ng, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    /// Tiles a length-L vector into `rows` identical rows.
    pub fn repeat_row(&mut self, v: VarId, rows: usize) -> Result<VarId> {
        let shape = self.nodes[v.0].shape.clone();
        let len = match shape.as_slice() {
            [l] => *l,
            [1, l] => *l,
            other => {
                return Err(Error::Dimension { op: "repeat_row", left: other.to_vec(), right: vec![0] })
            }
        };
        let mut value = Vec::with_capacity(rows * len);
        for _ in 0..rows {
            value.extend_from_slice(&self.nodes[v.0].value[..len]);
        }
        let ng = self.nodes[v.0].needs_grad;
        Ok(self.push(vec![rows, len], value, ng, Op::RepeatRow { v: v.0 }))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(shape, value, ng, Op::Relu { a: a.0 })
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(shape, value, ng, Op::Abs { a: a.0 })
    }

    /// Row-wise temperature softmax with per-row max subtraction:
    /// `y_i = exp((x_i - max_r) / tau) / sum_j exp((x_j - max_r) / tau)`.
    pub fn row_softmax(&mut self, a: VarId, tau: f32) -> Result<VarId> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {}", tau)));
        }
        let (rows, cols) = self.dims2("row_softmax", a)?;
        if cols == 0 {
            return Err(Error::Parameter("row_softmax: rows must have at least one entry".into()));
        }
        let inv_tau = 1.0 / tau;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let out = &mut value[r * cols..(r + 1) * cols];
            let mut sum = 0.0f32;
            for (o, x) in out.iter_mut().zip(row) {
                *o = ((x - max) * inv_tau).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![rows, cols], value, ng, Op::RowSoftmax { a: a.0, inv_tau }))
    }

    /// Row-wise `log(softmax(x / tau))`, numerically via max subtraction.
    pub fn log_row_softmax(&mut self, a: VarId, tau: f32) -> Result<VarId> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {}", tau)));
        }
        let (rows, cols) = self.dims2("log_row_softmax", a)?;
        if cols == 0 {
            return Err(Error::Parameter("log_row_softmax: rows must have at least one entry".into()));
        }
        let inv_tau = 1.0 / tau;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; rows * cols];
        let mut probs = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for x in row {
                sum += ((x - max) * inv_tau).exp();
            }
            let lse = sum.ln();
            for c in 0..cols {
                let z = (row[c] - max) * inv_tau;
                value[r * cols + c] = z - lse;
                probs[r * cols + c] = (z - lse).exp();
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![rows, cols], value, ng, Op::LogRowSoftmax { a: a.0, inv_tau, probs }))
    }

    /// Scales every row to unit Euclidean norm; rows with norm below 1e-12
    /// abort with a degenerate-feature error.
    pub fn l2_normalize_rows(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2("l2_normalize_rows", a)?;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; rows * cols];
        let mut norms = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateFeature { row: r, norm });
            }
            norms[r] = norm;
            for c in 0..cols {
                value[r * cols + c] = row[c] / norm;
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![rows, cols], value, ng, Op::L2NormalizeRows { a: a.0, norms }))
    }

    /// Per-dimension mean over the batch axis: `[B,d] -> [d]`.
    pub fn reduce_mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2("reduce_mean_rows", a)?;
        if rows == 0 {
            return Err(Error::Parameter("reduce_mean_rows: empty batch".into()));
        }
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c] += av[r * cols + c];
            }
        }
        for v in &mut value {
            *v /= rows as f32;
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![cols], value, ng, Op::ReduceMeanRows { a: a.0 }))
    }

    /// Per-dimension population variance (divide by B): `[B,d] -> [d]`.
    pub fn reduce_var_rows(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2("reduce_var_rows", a)?;
        if rows == 0 {
            return Err(Error::Parameter("reduce_var_rows: empty batch".into()));
        }
        let av = &self.nodes[a.0].value;
        let mut mean = vec![0.0f32; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += av[r * cols + c];
            }
        }
        for m in &mut mean {
            *m /= rows as f32;
        }
        let mut value = vec![0.0f32; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = av[r * cols + c] - mean[c];
                value[c] += d * d;
            }
        }
        for v in &mut value {
            *v /= rows as f32;
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![cols], value, ng, Op::ReduceVarRows { a: a.0, mean }))
    }

    /// Sums each row: `[B,N] -> [B]`.
    pub fn row_sum(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.dims2("row_sum", a)?;
        let av = &self.nodes[a.0].value;
        let value: Vec<f32> = (0..rows)
            .map(|r| av[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![rows], value, ng, Op::RowSum { a: a.0 }))
    }

    /// Mean of all entries, as a `[1]` scalar.
    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(Error::Parameter("mean_all: empty tensor".into()));
        }
        let value = vec![self.nodes[a.0].value.iter().sum::<f32>() / n as f32];
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![1], value, ng, Op::MeanAll { a: a.0 }))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let value = vec![self.nodes[a.0].value.iter().sum::<f32>()];
        let ng = self.nodes[a.0].needs_grad;
        self.push(vec![1], value, ng, Op::SumAll { a: a.0 })
    }

    /// Picks `x[b, labels[b]]` per row: `[B,N] -> [B]`.
    pub fn select_class(&mut self, a: VarId, labels: &[usize]) -> Result<VarId> {
        let (rows, cols) = self.dims2("select_class", a)?;
        if labels.len() != rows {
            return Err(Error::Parameter(format!(
                "select_class: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        let mut value = Vec::with_capacity(rows);
        for (r, &l) in labels.iter().enumerate() {
            if l >= cols {
                return Err(Error::Parameter(format!(
                    "select_class: label {} out of range [0, {})",
                    l, cols
                )));
            }
            value.push(self.nodes[a.0].value[r * cols + l]);
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![rows], value, ng, Op::SelectClass { a: a.0, labels: labels.to_vec() }))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Visits every recorded node at
    /// most once, in reverse execution order. Each call adds exactly
    /// `dLoss/dNode` into the persistent tape gradients, so repeated calls
    /// accumulate until [`Tape::clear_grads`].
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Parameter(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut local: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            local[i] = Some(g);
        }
        for (dst, src) in self.grads.iter_mut().zip(local) {
            if let Some(s) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.iter_mut().zip(&s) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(s),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[f32], local: &mut [Option<Vec<f32>>]) {
        fn add_grad(
            local: &mut [Option<Vec<f32>>],
            nodes: &[Node],
            idx: usize,
            f: impl FnOnce(&mut [f32]),
        ) {
            if local[idx].is_none() {
                local[idx] = Some(vec![0.0; nodes[idx].value.len()]);
            }
            f(local[idx].as_mut().expect("just allocated"));
        }
        let nodes = &self.nodes;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant | Op::Detach { .. } => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let n = nodes[b].shape[1];
                if self.needs(a) {
                    let bv = &nodes[b].value;
                    add_grad(local, nodes, a, |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                }
                if self.needs(b) {
                    let av = &nodes[a].value;
                    add_grad(local, nodes, b, |db| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] += s;
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                for id in [a, b] {
                    if self.needs(id) {
                        add_grad(local, nodes, id, |d| {
                            for (di, gi) in d.iter_mut().zip(g) {
                                *di += gi;
                            }
                        });
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    add_grad(local, nodes, a, |da| {
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
                if self.needs(b) {
                    add_grad(local, nodes, b, |db| {
                        for (d, gi) in db.iter_mut().zip(g) {
                            *d -= gi;
                        }
                    });
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = &nodes[b].value;
                    add_grad(local, nodes, a, |da| {
                        for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                            *d += gi * bi;
                        }
                    });
                }
                if self.needs(b) {
                    let av = &nodes[a].value;
                    add_grad(local, nodes, b, |db| {
                        for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                            *d += gi * ai;
                        }
                    });
                }
            }
            &Op::AddRow { a, bias } => {
                let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                if self.needs(a) {
                    add_grad(local, nodes, a, |da| {
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
                if self.needs(bias) {
                    add_grad(local, nodes, bias, |db| {
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                    });
                }
            }
            &Op::Scale { a, factor } => {
                if self.needs(a) {
                    add_grad(local, nodes, a, |da| {
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += factor * gi;
                        }
                    });
                }
            }
            &Op::ScaleVar { a, s } => {
                let sv = nodes[s].value[0];
                if self.needs(a) {
                    add_grad(local, nodes, a, |da| {
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += sv * gi;
                        }
                    });
                }
                if self.needs(s) {
                    let av = &nodes[a].value;
                    add_grad(local, nodes, s, |ds| {
                        let mut acc = 0.0;
                        for (gi, ai) in g.iter().zip(av) {
                            acc += gi * ai;
                        }
                        ds[0] += acc;
                    });
                }
            }
            &Op::Transpose { a } => {
                if self.needs(a) {
                    let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] += g[c * rows + r];
                            }
                        }
                    });
                }
            }
            &Op::ConcatCols { a, b } => {
                let (rows, ca) = (nodes[a].shape[0], nodes[a].shape[1]);
                let cb = nodes[b].shape[1];
                let w = ca + cb;
                if self.needs(a) {
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            for c in 0..ca {
                                da[r * ca + c] += g[r * w + c];
                            }
                        }
                    });
                }
                if self.needs(b) {
                    add_grad(local, nodes, b, |db| {
                        for r in 0..rows {
                            for c in 0..cb {
                                db[r * cb + c] += g[r * w + ca + c];
                            }
                        }
                    });
                }
            }
            &Op::RepeatRow { v } => {
                if self.needs(v) {
                    let len = nodes[v].value.len();
                    let rows = if len == 0 { 0 } else { g.len() / len };
                    add_grad(local, nodes, v, |dv| {
                        for r in 0..rows {
                            for c in 0..len {
                                dv[c] += g[r * len + c];
                            }
                        }
                    });
                }
            }
            &Op::Relu { a } => {
                if self.needs(a) {
                    let av = &nodes[a].value;
                    add_grad(local, nodes, a, |da| {
                        for ((d, gi), x) in da.iter_mut().zip(g).zip(av) {
                            if *x > 0.0 {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            &Op::Abs { a } => {
                if self.needs(a) {
                    let av = &nodes[a].value;
                    add_grad(local, nodes, a, |da| {
                        for ((d, gi), x) in da.iter_mut().zip(g).zip(av) {
                            // subgradient 0 at the kink
                            *d += gi * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
            }
            &Op::RowSoftmax { a, inv_tau } => {
                if self.needs(a) {
                    let (rows, cols) = (nodes[idx].shape[0], nodes[idx].shape[1]);
                    let y = &nodes[idx].value;
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f32 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            for c in 0..cols {
                                da[r * cols + c] += inv_tau * yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogRowSoftmax { a, inv_tau, probs } => {
                let (a, inv_tau) = (*a, *inv_tau);
                if self.needs(a) {
                    let (rows, cols) = (nodes[idx].shape[0], nodes[idx].shape[1]);
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            let pr = &probs[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let gsum: f32 = gr.iter().sum();
                            for c in 0..cols {
                                da[r * cols + c] += inv_tau * (gr[c] - pr[c] * gsum);
                            }
                        }
                    });
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let a = *a;
                if self.needs(a) {
                    let (rows, cols) = (nodes[idx].shape[0], nodes[idx].shape[1]);
                    let y = &nodes[idx].value;
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f32 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            for c in 0..cols {
                                da[r * cols + c] += (gr[c] - yr[c] * dot) / norms[r];
                            }
                        }
                    });
                }
            }
            &Op::ReduceMeanRows { a } => {
                if self.needs(a) {
                    let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let inv = 1.0 / rows as f32;
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] += g[c] * inv;
                            }
                        }
                    });
                }
            }
            Op::ReduceVarRows { a, mean } => {
                let a = *a;
                if self.needs(a) {
                    let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let av = &nodes[a].value;
                    let scale = 2.0 / rows as f32;
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] += g[c] * scale * (av[r * cols + c] - mean[c]);
                            }
                        }
                    });
                }
            }
            &Op::RowSum { a } => {
                if self.needs(a) {
                    let (rows, cols) = (nodes[a].shape[0], nodes[a].shape[1]);
                    add_grad(local, nodes, a, |da| {
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] += g[r];
                            }
                        }
                    });
                }
            }
            &Op::MeanAll { a } => {
                if self.needs(a) {
                    let n = nodes[a].value.len() as f32;
                    add_grad(local, nodes, a, |da| {
                        for d in da.iter_mut() {
                            *d += g[0] / n;
                        }
                    });
                }
            }
            &Op::SumAll { a } => {
                if self.needs(a) {
                    add_grad(local, nodes, a, |da| {
                        for d in da.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
            }
            Op::SelectClass { a, labels } => {
                let a = *a;
                if self.needs(a) {
                    let cols = nodes[a].shape[1];
                    add_grad(local, nodes, a, |da| {
                        for (r, &l) in labels.iter().enumerate() {
                            da[r * cols + l] += g[r];
                        }
                    });
                }
            }
        }
    }
}
