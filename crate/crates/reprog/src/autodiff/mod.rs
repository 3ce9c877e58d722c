//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a flat tape: every operation appends a node holding the
//! forward value, and [`Graph::backward`] walks the tape once in reverse,
//! accumulating gradients into the leaves that were created with
//! `requires_grad`. The primitive set is exactly what the sequence
//! classifiers and the attack objectives need; there is no fusion and no
//! graph rewriting.
//!
//! All arithmetic is performed in `f64`. Checkpoints serialize as little
//! endian `f32` (see [`checkpoint`]), which round-trips bit-exactly.

pub mod adam;
pub mod checkpoint;
mod diff_check;

pub use adam::AdamState;
pub use diff_check::finite_diff_check;

use std::fmt;

/// Errors raised by tensor construction, graph ops and backward.
#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    /// Input shapes do not conform to the operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced (or was given) a NaN or infinite value.
    NonFinite { op: &'static str },
    /// Input outside the operation's domain, e.g. log of a non-positive value.
    Domain { op: &'static str, detail: String },
    /// A node id that does not belong to this graph.
    InvalidNode,
    /// Backward requires a single-element loss tensor.
    NotScalar { len: usize },
    /// The loss does not depend on any tracked leaf.
    NoGradPath,
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Self::Domain { op, detail } => write!(f, "{op}: {detail}"),
            Self::InvalidNode => write!(f, "node id does not belong to this graph"),
            Self::NotScalar { len } => write!(f, "backward needs a scalar loss, got {len} elements"),
            Self::NoGradPath => write!(f, "loss does not depend on any tracked leaf"),
        }
    }
}

impl std::error::Error for AutodiffError {}

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that `shape` matches `data` and that every
    /// entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} does not hold {} elements", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    /// A trainable tensor (`requires_grad = true`).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols, cols)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MatMul { a: usize, b: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softmax { a: usize },
    Concat { a: usize, b: usize, axis: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { input: usize, kernel: usize },
    MaxOverTime { a: usize, argmax: Vec<usize> },
    MeanOverTime { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    Scale { a: usize, c: f64 },
    Slice { a: usize, axis: usize, start: usize, len: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Flat tape of recorded operations. Nodes are appended in topological
/// order by construction; [`Graph::backward`] visits them once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a copy of `t` as a leaf. Its `requires_grad` flag decides
    /// whether gradients are accumulated for it.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let tracked = t.requires_grad;
        self.push(Op::Leaf, t.clone(), tracked)
    }

    /// Inserts a leaf that never tracks gradients.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to node `id`, if the
    /// node is tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, tracked });
        id
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::InvalidNode)
        }
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn finite(op: &'static str, data: &[f64]) -> Result<(), AutodiffError> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite { op })
        }
    }

    // ── Forward primitives ──────────────────────────────────────────────

    /// Elementwise sum. `b` may also be a vector matching the last axis of
    /// `a`, in which case it is broadcast over rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
            Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None }
        } else if Self::is_row_broadcast(va, vb) {
            let cols = vb.data.len();
            let data = va
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + vb.data[i % cols])
                .collect();
            Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None }
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        };
        Self::finite("add", &out.data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out, tracked))
    }

    /// Elementwise product, with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
            Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None }
        } else if Self::is_row_broadcast(va, vb) {
            let cols = vb.data.len();
            let data = va
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x * vb.data[i % cols])
                .collect();
            Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None }
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        };
        Self::finite("mul", &out.data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out, tracked))
    }

    fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
        b.shape.len() == 1 && !a.shape.is_empty() && *a.shape.last().unwrap() == b.data.len()
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape, vb.shape),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va.data[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for (o, bval) in orow.iter_mut().zip(brow) {
                    *o += x * bval;
                }
            }
        }
        Self::finite("matmul", &data)?;
        let out = Tensor { shape: vec![m, n], data, requires_grad: false, grad: None };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out, tracked))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, "tanh", |x| x.tanh(), |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |a| Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, "exp", |x| x.exp(), |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        if let Some(bad) = va.data.iter().find(|v| **v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        self.unary(a, "log", |x| x.ln(), |a| Op::Log { a })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data.iter().map(|x| x * c).collect();
        Self::finite("scale", &data)?;
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let tracked = self.tracked(a);
        Ok(self.push(Op::Scale { a: a.0, c }, out, tracked))
    }

    fn unary(
        &mut self,
        a: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data.iter().map(|x| f(*x)).collect();
        Self::finite(name, &data)?;
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let tracked = self.tracked(a);
        Ok(self.push(op(a.0), out, tracked))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.rows_cols();
        let mut data = vec![0.0; va.data.len()];
        for r in 0..rows {
            let row = &va.data[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_row(row, out);
        }
        Self::finite("softmax", &data)?;
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let tracked = self.tracked(a);
        Ok(self.push(Op::Softmax { a: a.0 }, out, tracked))
    }

    /// Concatenates along `axis` (tensors must agree on every other axis).
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let nd = va.shape.len();
        let compatible = nd == vb.shape.len()
            && axis < nd
            && va
                .shape
                .iter()
                .zip(&vb.shape)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: format!("{:?} vs {:?} along axis {axis}", va.shape, vb.shape),
            });
        }
        let mut shape = va.shape.clone();
        shape[axis] += vb.shape[axis];
        // outer = product of dims before axis, inner = product after
        let outer: usize = va.shape[..axis].iter().product();
        let inner: usize = va.shape[axis + 1..].iter().product();
        let (ablk, bblk) = (va.shape[axis] * inner, vb.shape[axis] * inner);
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        for o in 0..outer {
            data.extend_from_slice(&va.data[o * ablk..(o + 1) * ablk]);
            data.extend_from_slice(&vb.data[o * bblk..(o + 1) * bblk]);
        }
        let out = Tensor { shape, data, requires_grad: false, grad: None };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Concat { a: a.0, b: b.0, axis }, out, tracked))
    }

    /// Looks rows of `table` (`[V, d]`) up by id, producing `[N, d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        self.check(table)?;
        let vt = &self.nodes[table.0].value;
        if vt.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding",
                detail: format!("table must be 2-d, got {:?}", vt.shape),
            });
        }
        let (v, d) = (vt.shape[0], vt.shape[1]);
        if ids.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding",
                detail: "empty id sequence".into(),
            });
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::Domain {
                op: "embedding",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt.data[i * d..(i + 1) * d]);
        }
        let out = Tensor { shape: vec![ids.len(), d], data, requires_grad: false, grad: None };
        let tracked = self.tracked(table);
        Ok(self.push(Op::Embedding { table: table.0, ids: ids.to_vec() }, out, tracked))
    }

    /// 1-d convolution with "same" zero padding.
    ///
    /// `input` is `[N, c_in]`, `kernel` is `[k, c_in, c_out]`, output is
    /// `[N, c_out]` with `out[i,o] = sum_j sum_c kernel[j,c,o] *
    /// input[i + floor(k/2) - j, c]` and out-of-range positions contributing
    /// zero.
    pub fn conv1d_same(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        self.check(kernel)?;
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if vi.shape.len() != 2 || vk.shape.len() != 3 || vi.shape[1] != vk.shape[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                detail: format!("input {:?}, kernel {:?}", vi.shape, vk.shape),
            });
        }
        let (n, c_in) = (vi.shape[0], vi.shape[1]);
        let (k, c_out) = (vk.shape[0], vk.shape[2]);
        let off = k / 2;
        let mut data = vec![0.0; n * c_out];
        for i in 0..n {
            for j in 0..k {
                let p = i as isize + off as isize - j as isize;
                if p < 0 || p >= n as isize {
                    continue;
                }
                let irow = &vi.data[p as usize * c_in..(p as usize + 1) * c_in];
                for (c, x) in irow.iter().enumerate() {
                    if *x == 0.0 {
                        continue;
                    }
                    let krow = &vk.data[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                    let orow = &mut data[i * c_out..(i + 1) * c_out];
                    for (o, kv) in orow.iter_mut().zip(krow) {
                        *o += x * kv;
                    }
                }
            }
        }
        Self::finite("conv1d", &data)?;
        let out = Tensor { shape: vec![n, c_out], data, requires_grad: false, grad: None };
        let tracked = self.tracked(input) || self.tracked(kernel);
        Ok(self.push(Op::Conv1d { input: input.0, kernel: kernel.0 }, out, tracked))
    }

    /// Max over the time axis: `[N, F] -> [1, F]`. Ties go to the earliest
    /// timestep.
    pub fn max_over_time(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "max-over-time",
                detail: format!("expected 2-d, got {:?}", va.shape),
            });
        }
        let (n, f) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; f];
        let mut argmax = vec![0usize; f];
        for c in 0..f {
            let mut best = va.data[c];
            let mut best_i = 0;
            for i in 1..n {
                let v = va.data[i * f + c];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data[c] = best;
            argmax[c] = best_i;
        }
        let out = Tensor { shape: vec![1, f], data, requires_grad: false, grad: None };
        let tracked = self.tracked(a);
        Ok(self.push(Op::MaxOverTime { a: a.0, argmax }, out, tracked))
    }

    /// Mean over the time axis: `[N, F] -> [1, F]`.
    pub fn mean_over_time(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean-over-time",
                detail: format!("expected 2-d, got {:?}", va.shape),
            });
        }
        let (n, f) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; f];
        for i in 0..n {
            for c in 0..f {
                data[c] += va.data[i * f + c];
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        let out = Tensor { shape: vec![1, f], data, requires_grad: false, grad: None };
        let tracked = self.tracked(a);
        Ok(self.push(Op::MeanOverTime { a: a.0 }, out, tracked))
    }

    /// Summed cross-entropy between logit rows and integer targets.
    ///
    /// `logits` is `[N, L]` (or a single row `[L]`), `targets` holds one
    /// class id per row. Output is the scalar
    /// `sum_r (logsumexp(row_r) - row_r[target_r])`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        self.check(logits)?;
        let vl = &self.nodes[logits.0].value;
        let (rows, cols) = vl.rows_cols();
        if vl.shape.len() > 2 || targets.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross-entropy",
                detail: format!("{rows} logit rows vs {} targets", targets.len()),
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(AutodiffError::Domain {
                op: "cross-entropy",
                detail: format!("target {bad} out of range for {cols} classes"),
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &vl.data[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[t];
        }
        if !total.is_finite() {
            return Err(AutodiffError::NonFinite { op: "cross-entropy" });
        }
        let out = Tensor { shape: vec![1], data: vec![total], requires_grad: false, grad: None };
        let tracked = self.tracked(logits);
        Ok(self.push(Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() }, out, tracked))
    }

    /// Slices `len` indices starting at `start` along `axis` (1-d or 2-d).
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let nd = va.shape.len();
        if nd > 2 || axis >= nd || len == 0 || start + len > va.shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {start}+{len}) along axis {axis} of {:?}", va.shape),
            });
        }
        let mut shape = va.shape.clone();
        shape[axis] = len;
        let data = if nd == 1 || axis == 0 {
            let inner: usize = va.shape[1..].iter().product();
            va.data[start * inner..(start + len) * inner].to_vec()
        } else {
            let cols = va.shape[1];
            let mut out = Vec::with_capacity(va.shape[0] * len);
            for r in 0..va.shape[0] {
                out.extend_from_slice(&va.data[r * cols + start..r * cols + start + len]);
            }
            out
        };
        let out = Tensor { shape, data, requires_grad: false, grad: None };
        let tracked = self.tracked(a);
        Ok(self.push(Op::Slice { a: a.0, axis, start, len }, out, tracked))
    }

    /// Sum of every entry of a 2-d node, as a `[1,1]` scalar. Composed from
    /// matmul, mean-over-time and scale.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum",
                detail: format!("expected 2-d, got {:?}", va.shape),
            });
        }
        let (n, f) = (va.shape[0], va.shape[1]);
        let ones = self.constant(Tensor::new(vec![f, 1], vec![1.0; f]).expect("ones"));
        let rowsum = self.matmul(a, ones)?;
        let mean = self.mean_over_time(rowsum)?;
        self.scale(mean, n as f64)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss` node. Gradients are stored on every
    /// tracked node and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        self.check(loss)?;
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(AutodiffError::NotScalar { len: n });
        }
        if !self.tracked(loss.0.into()) {
            return Err(AutodiffError::NoGradPath);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.accumulate(idx, &gout, &mut grads);
            self.nodes[idx].value.grad = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut bump = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target].tracked {
                return;
            }
            let slot = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].value.numel()]);
            f(slot);
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                bump(*a, &mut |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                if va.shape == vb.shape {
                    bump(*b, &mut |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                } else {
                    let cols = vb.data.len();
                    bump(*b, &mut |g| {
                        for (i, go) in gout.iter().enumerate() {
                            g[i % cols] += go;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if va.shape == vb.shape {
                    bump(*a, &mut |g| {
                        for ((gi, go), y) in g.iter_mut().zip(gout).zip(&vb.data) {
                            *gi += go * y;
                        }
                    });
                    bump(*b, &mut |g| {
                        for ((gi, go), x) in g.iter_mut().zip(gout).zip(&va.data) {
                            *gi += go * x;
                        }
                    });
                } else {
                    let cols = vb.data.len();
                    bump(*a, &mut |g| {
                        for (i, (gi, go)) in g.iter_mut().zip(gout).enumerate() {
                            *gi += go * vb.data[i % cols];
                        }
                    });
                    bump(*b, &mut |g| {
                        for (i, go) in gout.iter().enumerate() {
                            g[i % cols] += go * va.data[i];
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = dOut x B^T
                bump(*a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * vb.data[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T x dOut
                bump(*b, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = va.data[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += x * gout[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Tanh { a } => {
                let y = &self.nodes[idx].value.data;
                bump(*a, &mut |g| {
                    for ((gi, go), yv) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[idx].value.data;
                bump(*a, &mut |g| {
                    for ((gi, go), yv) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp { a } => {
                let y = &self.nodes[idx].value.data;
                bump(*a, &mut |g| {
                    for ((gi, go), yv) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * yv;
                    }
                });
            }
            Op::Log { a } => {
                let x = &self.nodes[*a].value.data;
                bump(*a, &mut |g| {
                    for ((gi, go), xv) in g.iter_mut().zip(gout).zip(x) {
                        *gi += go / xv;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = y.rows_cols();
                bump(*a, &mut |g| {
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..cols {
                            g[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let outer: usize = va.shape[..*axis].iter().product();
                let inner: usize = va.shape[*axis + 1..].iter().product();
                let (ablk, bblk) = (va.shape[*axis] * inner, vb.shape[*axis] * inner);
                let blk = ablk + bblk;
                bump(*a, &mut |g| {
                    for o in 0..outer {
                        for i in 0..ablk {
                            g[o * ablk + i] += gout[o * blk + i];
                        }
                    }
                });
                bump(*b, &mut |g| {
                    for o in 0..outer {
                        for i in 0..bblk {
                            g[o * bblk + i] += gout[o * blk + ablk + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.shape[1];
                bump(*table, &mut |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] += gout[row * d + c];
                        }
                    }
                });
            }
            Op::Conv1d { input, kernel } => {
                let (vi, vk) = (&self.nodes[*input].value, &self.nodes[*kernel].value);
                let (n, c_in) = (vi.shape[0], vi.shape[1]);
                let (k, c_out) = (vk.shape[0], vk.shape[2]);
                let off = k / 2;
                bump(*kernel, &mut |g| {
                    for i in 0..n {
                        for j in 0..k {
                            let p = i as isize + off as isize - j as isize;
                            if p < 0 || p >= n as isize {
                                continue;
                            }
                            for c in 0..c_in {
                                let x = vi.data[p as usize * c_in + c];
                                if x == 0.0 {
                                    continue;
                                }
                                let base = (j * c_in + c) * c_out;
                                for o in 0..c_out {
                                    g[base + o] += x * gout[i * c_out + o];
                                }
                            }
                        }
                    }
                });
                bump(*input, &mut |g| {
                    for i in 0..n {
                        for j in 0..k {
                            let p = i as isize + off as isize - j as isize;
                            if p < 0 || p >= n as isize {
                                continue;
                            }
                            for c in 0..c_in {
                                let base = (j * c_in + c) * c_out;
                                let mut s = 0.0;
                                for o in 0..c_out {
                                    s += vk.data[base + o] * gout[i * c_out + o];
                                }
                                g[p as usize * c_in + c] += s;
                            }
                        }
                    }
                });
            }
            Op::MaxOverTime { a, argmax } => {
                let f = self.nodes[idx].value.shape[1];
                bump(*a, &mut |g| {
                    for c in 0..f {
                        g[argmax[c] * f + c] += gout[c];
                    }
                });
            }
            Op::MeanOverTime { a } => {
                let va = &self.nodes[*a].value;
                let (n, f) = (va.shape[0], va.shape[1]);
                bump(*a, &mut |g| {
                    for i in 0..n {
                        for c in 0..f {
                            g[i * f + c] += gout[c] / n as f64;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = &self.nodes[*logits].value;
                let (_, cols) = vl.rows_cols();
                let go = gout[0];
                bump(*logits, &mut |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &vl.data[r * cols..(r + 1) * cols];
                        let mut probs = vec![0.0; cols];
                        softmax_row(row, &mut probs);
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * cols + c] += go * (probs[c] - onehot);
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                bump(*a, &mut |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                });
            }
            Op::Slice { a, axis, start, len } => {
                let va = &self.nodes[*a].value;
                let nd = va.shape.len();
                if nd == 1 || *axis == 0 {
                    let inner: usize = va.shape[1..].iter().product();
                    bump(*a, &mut |g| {
                        for i in 0..len * inner.max(1) {
                            g[start * inner.max(1) + i] += gout[i];
                        }
                    });
                } else {
                    let cols = va.shape[1];
                    bump(*a, &mut |g| {
                        for r in 0..va.shape[0] {
                            for i in 0..*len {
                                g[r * cols + start + i] += gout[r * len + i];
                            }
                        }
                    });
                }
            }
        }
    }
}

impl From<usize> for NodeId {
    fn from(v: usize) -> Self {
        NodeId(v)
    }
}

/// Stable softmax of one row (max subtraction, then normalize).
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Stable `log(sum(exp(row)))`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn p(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let sum: f64 = g.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tanh_at_origin_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1], vec![0.0]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    // Brute-force zero-padded sliding window, the conv oracle.
    fn conv_naive(input: &[f64], n: usize, c_in: usize, kernel: &[f64], k: usize, c_out: usize) -> Vec<f64> {
        let off = k as isize / 2;
        let mut out = vec![0.0; n * c_out];
        for i in 0..n as isize {
            for o in 0..c_out {
                let mut s = 0.0;
                for j in 0..k as isize {
                    let pp = i + off - j;
                    if pp < 0 || pp >= n as isize {
                        continue;
                    }
                    for c in 0..c_in {
                        s += kernel[((j as usize) * c_in + c) * c_out + o]
                            * input[(pp as usize) * c_in + c];
                    }
                }
                out[i as usize * c_out + o] = s;
            }
        }
        out
    }

    #[test]
    fn conv1d_same_width3_ones() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![3, 1], vec![1.0, 2.0, 3.0]));
        let k = g.constant(t(vec![3, 1, 1], vec![1.0, 1.0, 1.0]));
        let y = g.conv1d_same(x, k).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
        let naive = conv_naive(&[1.0, 2.0, 3.0], 3, 1, &[1.0; 3], 3, 1);
        assert_eq!(g.value(y).data(), naive.as_slice());
    }

    #[test]
    fn conv1d_matches_naive_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(1..7usize);
            let c_in = rng.random_range(1..4usize);
            let c_out = rng.random_range(1..4usize);
            let k = rng.random_range(1..6usize);
            let input: Vec<f64> = (0..n * c_in).map(|_| rng.random_range(-2.0..2.0)).collect();
            let kernel: Vec<f64> =
                (0..k * c_in * c_out).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(t(vec![n, c_in], input.clone()));
            let kk = g.constant(t(vec![k, c_in, c_out], kernel.clone()));
            let y = g.conv1d_same(x, kk).unwrap();
            let naive = conv_naive(&input, n, c_in, &kernel, k, c_out);
            for (a, b) in g.value(y).data().iter().zip(&naive) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![1, 2], vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_at_even_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(&p(vec![1, 2], vec![0.0, 0.0]));
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!((grad[0] - (-0.5)).abs() < 1e-12);
        assert!((grad[1] - 0.5).abs() < 1e-12);
        // loss itself is log(2)
        assert!((g.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(AutodiffError::Domain { .. })));
    }

    #[test]
    fn backward_on_foreign_node_fails() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![1, 1], vec![1.0]));
        let _ = x;
        assert_eq!(g.backward(NodeId(99)), Err(AutodiffError::InvalidNode));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![1, 2], vec![1.0, 2.0]));
        assert_eq!(g.backward(x), Err(AutodiffError::NotScalar { len: 2 }));
    }

    #[test]
    fn tensor_rejects_nan() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(AutodiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn max_over_time_ties_go_to_earliest() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![2, 1], vec![1.0, 1.0]));
        let y = g.max_over_time(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(t(vec![2, 3], vec![0.0; 6]));
        assert!(matches!(g.embedding(table, &[2]), Err(AutodiffError::Domain { .. })));
    }

    #[test]
    fn concat_axis1_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(&p(vec![1, 2], vec![1.0, 2.0]));
        let b = g.leaf(&p(vec![1, 3], vec![3.0, 4.0, 5.0]));
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let loss = g.sum_all(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn slice_axis1_backward_scatters() {
        let mut g = Graph::new();
        let a = g.leaf(&p(vec![2, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let s = g.slice(a, 1, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(&p(vec![2, 3], vec![0.3, -0.2, 0.9, 1.4, -2.0, 0.05]));
            let s = g.softmax(x).unwrap();
            let th = g.tanh(s).unwrap();
            let loss = g.sum_all(th).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad(x).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
