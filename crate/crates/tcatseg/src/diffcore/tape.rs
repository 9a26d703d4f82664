//! Dense f64 tensors recorded on a reverse-mode differentiation tape.
//!
//! Every operation appends one node holding the forward value plus the
//! information needed to replay the chain rule in reverse. Tensors are
//! immutable once created, and all reductions run in a fixed sequential
//! order, so identical inputs produce bit-identical results.

use std::sync::Mutex;

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// One recorded tensor: forward value plus the operation that produced it.
#[derive(Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Accumulated gradient; populated by `backward`, `None` for detached
    /// tensors and before the first backward pass.
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// out = mul * x + add, elementwise with constants.
    AffineScalar { x: usize, mul: f64, add: f64 },
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    MaxAll { x: usize, argmax: usize },
    SumAxis { x: usize, axis: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    ScatterAddRows { x: usize, indices: Vec<usize> },
    GatherElems { x: usize, cols: Vec<usize> },
    ConcatCols(usize, usize),
    /// out[i] = sum_j weights[i*k+j] * x[indices[i*k+j]], row-wise.
    WeightedGather { x: usize, indices: Vec<usize>, weights: Vec<f64>, k: usize },
    /// Broadcast multiply by a one-element tensor.
    ScaleBy { x: usize, s: usize },
    /// Row-broadcast bias add: x[n,c] + v[c].
    AddRowVec { x: usize, v: usize },
    /// Scalar sum of per-element smooth-L1 magnitudes (threshold 1).
    HuberSum(usize),
    /// Softmax over rows within each segment, independently per column.
    SegmentSoftmax { x: usize, segments: Vec<usize> },
    /// Sum over rows within each segment.
    SegmentSum { x: usize, segments: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AffineScalar { .. } => "affine_scalar",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::MaxAll { .. } => "max_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::ConcatCols(..) => "concat_cols",
            Op::WeightedGather { .. } => "weighted_gather",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddRowVec { .. } => "add_row_vec",
            Op::HuberSum(..) => "huber_sum",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SegmentSum { .. } => "segment_sum",
        }
    }
}

/// Backward-rule corruption hook for negative-control tests: scales the
/// upstream adjoint of the named op by 1.01 so gradient checks must fail.
static CORRUPT_OP: Mutex<Option<String>> = Mutex::new(None);

pub fn set_backward_corruption(op_name: Option<&str>) {
    *CORRUPT_OP.lock().unwrap() = op_name.map(|s| s.to_string());
}

fn active_corruption() -> Option<String> {
    CORRUPT_OP.lock().unwrap().clone()
}

/// Ordered record of tensors; inputs always precede the operations that
/// consume them, so reverse iteration is a valid chain-rule order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.node(id).numel()
    }

    fn check_len(&self, op: &'static str, shape: &[usize], data: &[f64]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract {
                op,
                msg: format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(())
    }

    /// Detached input: participates in forward values only.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.check_len("constant", shape, &data)?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable input: receives a gradient accumulator on backward.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.check_len("leaf", shape, &data)?;
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Dimension {
                op: op_name,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(self.node(a).shape.clone(), data, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise `mul * x + add` with f64 constants.
    pub fn affine_scalar(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| mul * v + add).collect();
        let rg = self.node(x).requires_grad;
        self.push(self.node(x).shape.clone(), data, rg, Op::AffineScalar { x: x.0, mul, add })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.node(a).data, &self.node(b).data, m, k, n, &mut out);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.node(x).shape;
        if s.len() != 2 {
            return Err(Error::Contract {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.node(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(x.0)))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(x).numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.node(x).shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.node(x).data.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x.0)))
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.node(x).requires_grad;
        self.push(self.node(x).shape.clone(), data, rg, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let rg = self.node(x).requires_grad;
        self.push(self.node(x).shape.clone(), data, rg, Op::Sigmoid(x.0))
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.node(x).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let (outer, len, inner) = lane_geometry(&shape, axis);
        let src = &self.node(x).data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - m).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, rg, Op::Softmax { x: x.0, axis }))
    }

    /// Log-softmax along `axis`, stabilized via log-sum-exp.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.node(x).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract {
                op: "log_softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let (outer, len, inner) = lane_geometry(&shape, axis);
        let src = &self.node(x).data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (src[base + l * inner] - m).exp();
                }
                let lse = m + sum.ln();
                for l in 0..len {
                    out[base + l * inner] = src[base + l * inner] - lse;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, rg, Op::LogSoftmax { x: x.0, axis }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![], vec![s], rg, Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x).numel() as f64;
        let s: f64 = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![], vec![s / n], rg, Op::MeanAll(x.0))
    }

    /// Max over all entries; ties resolve to the lowest index.
    pub fn max_all(&mut self, x: TensorId) -> TensorId {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (i, &v) in self.node(x).data.iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        let rg = self.node(x).requires_grad;
        self.push(vec![], vec![best], rg, Op::MaxAll { x: x.0, argmax: arg })
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.node(x).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract {
                op: "sum_axis",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let (outer, len, inner) = lane_geometry(&shape, axis);
        let src = &self.node(x).data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[o * len * inner + l * inner + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.node(x).requires_grad;
        Ok(self.push(new_shape, out, rg, Op::SumAxis { x: x.0, axis }))
    }

    fn row_size(&self, op: &'static str, x: TensorId) -> Result<(usize, usize)> {
        let s = &self.node(x).shape;
        if s.is_empty() {
            return Err(Error::Contract {
                op,
                msg: "expected rank >= 1".to_string(),
            });
        }
        let rows = s[0];
        let row = self.node(x).numel() / rows.max(1);
        Ok((rows, row))
    }

    /// Gather along axis 0: out row i = x row indices[i].
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, row) = self.row_size("gather_rows", x)?;
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
        }
        let src = &self.node(x).data;
        let mut out = vec![0.0; indices.len() * row];
        for (oi, &si) in indices.iter().enumerate() {
            out[oi * row..(oi + 1) * row].copy_from_slice(&src[si * row..(si + 1) * row]);
        }
        let mut shape = self.node(x).shape.clone();
        shape[0] = indices.len();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, rg, Op::GatherRows { x: x.0, indices: indices.to_vec() }))
    }

    /// Adjoint of gather: out row indices[i] += x row i, over `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        x: TensorId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<TensorId> {
        let (rows, row) = self.row_size("scatter_add_rows", x)?;
        if indices.len() != rows {
            return Err(Error::Contract {
                op: "scatter_add_rows",
                msg: format!("{} indices for {} rows", indices.len(), rows),
            });
        }
        for &i in indices {
            if i >= out_rows {
                return Err(Error::Index {
                    op: "scatter_add_rows",
                    index: i,
                    len: out_rows,
                });
            }
        }
        let src = &self.node(x).data;
        let mut out = vec![0.0; out_rows * row];
        for (si, &oi) in indices.iter().enumerate() {
            for j in 0..row {
                out[oi * row + j] += src[si * row + j];
            }
        }
        let mut shape = self.node(x).shape.clone();
        shape[0] = out_rows;
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, rg, Op::ScatterAddRows { x: x.0, indices: indices.to_vec() }))
    }

    /// Per-row column pick: out[i] = x[i, cols[i]].
    pub fn gather_elems(&mut self, x: TensorId, cols: &[usize]) -> Result<TensorId> {
        let s = &self.node(x).shape;
        if s.len() != 2 {
            return Err(Error::Contract {
                op: "gather_elems",
                msg: format!("expected rank 2, got {:?}", s),
            });
        }
        let (n, c) = (s[0], s[1]);
        if cols.len() != n {
            return Err(Error::Contract {
                op: "gather_elems",
                msg: format!("{} column picks for {} rows", cols.len(), n),
            });
        }
        for &j in cols {
            if j >= c {
                return Err(Error::Index {
                    op: "gather_elems",
                    index: j,
                    len: c,
                });
            }
        }
        let src = &self.node(x).data;
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![n], out, rg, Op::GatherElems { x: x.0, cols: cols.to_vec() }))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (n, c1, c2) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * (c1 + c2)];
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        for i in 0..n {
            out[i * (c1 + c2)..i * (c1 + c2) + c1].copy_from_slice(&da[i * c1..(i + 1) * c1]);
            out[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)].copy_from_slice(&db[i * c2..(i + 1) * c2]);
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![n, c1 + c2], out, rg, Op::ConcatCols(a.0, b.0)))
    }

    /// Fixed-weight row interpolation: out[i] = sum_j w[i*k+j] * x[idx[i*k+j]].
    /// The weights are constants (not differentiated).
    pub fn weighted_gather(
        &mut self,
        x: TensorId,
        indices: &[usize],
        weights: &[f64],
        k: usize,
    ) -> Result<TensorId> {
        let s = &self.node(x).shape;
        if s.len() != 2 {
            return Err(Error::Contract {
                op: "weighted_gather",
                msg: format!("expected rank 2, got {:?}", s),
            });
        }
        if k == 0 || indices.len() != weights.len() || indices.len() % k != 0 {
            return Err(Error::Contract {
                op: "weighted_gather",
                msg: format!("{} indices, {} weights, group size {}", indices.len(), weights.len(), k),
            });
        }
        let (n, c) = (s[0], s[1]);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    op: "weighted_gather",
                    index: i,
                    len: n,
                });
            }
        }
        let q = indices.len() / k;
        let src = &self.node(x).data;
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            for j in 0..k {
                let w = weights[i * k + j];
                let r = indices[i * k + j];
                for d in 0..c {
                    out[i * c + d] += w * src[r * c + d];
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![q, c],
            out,
            rg,
            Op::WeightedGather {
                x: x.0,
                indices: indices.to_vec(),
                weights: weights.to_vec(),
                k,
            },
        ))
    }

    /// Broadcast multiply by a one-element tensor (e.g. a learnable mixing
    /// coefficient).
    pub fn scale_by(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.node(s).numel() != 1 {
            return Err(Error::Contract {
                op: "scale_by",
                msg: format!("scale must have one element, got shape {:?}", self.node(s).shape),
            });
        }
        let sv = self.node(s).data[0];
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| sv * v).collect();
        let rg = self.node(x).requires_grad || self.node(s).requires_grad;
        Ok(self.push(self.node(x).shape.clone(), data, rg, Op::ScaleBy { x: x.0, s: s.0 }))
    }

    /// Row-broadcast bias: x[n,c] + v[c].
    pub fn add_row_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (sx, sv) = (&self.node(x).shape, &self.node(v).shape);
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(Error::Dimension {
                op: "add_row_vec",
                lhs: sx.clone(),
                rhs: sv.clone(),
            });
        }
        let (n, c) = (sx[0], sx[1]);
        let (dx, dv) = (&self.node(x).data, &self.node(v).data);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = dx[i * c + j] + dv[j];
            }
        }
        let rg = self.node(x).requires_grad || self.node(v).requires_grad;
        Ok(self.push(vec![n, c], out, rg, Op::AddRowVec { x: x.0, v: v.0 }))
    }

    /// Sum of smooth-L1 magnitudes: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
    pub fn huber_sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self
            .node(x)
            .data
            .iter()
            .map(|&d| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 })
            .sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![], vec![s], rg, Op::HuberSum(x.0))
    }

    fn check_segments(&self, op: &'static str, x: TensorId, segments: &[usize]) -> Result<usize> {
        let s = &self.node(x).shape;
        if s.len() != 2 {
            return Err(Error::Contract {
                op,
                msg: format!("expected rank 2, got {:?}", s),
            });
        }
        if segments.iter().any(|&l| l == 0) {
            return Err(Error::Contract {
                op,
                msg: "empty segment".to_string(),
            });
        }
        let total: usize = segments.iter().sum();
        if total != s[0] {
            return Err(Error::Contract {
                op,
                msg: format!("segments cover {} rows, tensor has {}", total, s[0]),
            });
        }
        Ok(s[1])
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: TensorId, segments: &[usize]) -> Result<TensorId> {
        let c = self.check_segments("segment_softmax", x, segments)?;
        let src = &self.node(x).data;
        let mut out = vec![0.0; src.len()];
        let mut base = 0;
        for &len in segments {
            for j in 0..c {
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(src[(base + l) * c + j]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[(base + l) * c + j] - m).exp();
                    out[(base + l) * c + j] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[(base + l) * c + j] /= sum;
                }
            }
            base += len;
        }
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, rg, Op::SegmentSoftmax { x: x.0, segments: segments.to_vec() }))
    }

    /// Row sums per segment: out[s] = sum of segment s's rows.
    pub fn segment_sum(&mut self, x: TensorId, segments: &[usize]) -> Result<TensorId> {
        let c = self.check_segments("segment_sum", x, segments)?;
        let src = &self.node(x).data;
        let mut out = vec![0.0; segments.len() * c];
        let mut base = 0;
        for (si, &len) in segments.iter().enumerate() {
            for l in 0..len {
                for j in 0..c {
                    out[si * c + j] += src[(base + l) * c + j];
                }
            }
            base += len;
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![segments.len(), c], out, rg, Op::SegmentSum { x: x.0, segments: segments.to_vec() }))
    }

    /// Reverse sweep from a scalar root. Gradients of `requires_grad`
    /// tensors accumulate across repeated calls.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.node(root).numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.node(root).shape),
            });
        }
        let corrupt = active_corruption();
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.node(root).requires_grad {
            adj[root.0] = Some(vec![1.0]);
        }

        for i in (0..=root.0).rev() {
            if adj[i].is_none() {
                continue;
            }
            // Inputs always precede node i, so split to borrow upstream
            // adjoint and downstream accumulators simultaneously.
            let (lo, hi) = adj.split_at_mut(i);
            let g_ref = hi[0].as_ref().expect("adjoint present");
            let corrupted;
            let g: &[f64] = if corrupt.as_deref() == Some(self.nodes[i].op.name()) {
                corrupted = g_ref.iter().map(|v| v * 1.01).collect::<Vec<f64>>();
                &corrupted
            } else {
                g_ref
            };
            let nodes = &self.nodes;
            let rg = |j: usize| nodes[j].requires_grad;
            let acc = |store: &mut [Option<Vec<f64>>], j: usize, f: &mut dyn FnMut(&mut [f64])| {
                let slot = store[j].get_or_insert_with(|| vec![0.0; nodes[j].numel()]);
                f(slot);
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(lo, *a, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        });
                    }
                    if rg(*b) {
                        acc(lo, *b, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        });
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(lo, *a, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        });
                    }
                    if rg(*b) {
                        acc(lo, *b, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv -= gv;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let bd = &nodes[*b].data;
                        acc(lo, *a, &mut |d| {
                            for ((dv, gv), bv) in d.iter_mut().zip(g).zip(bd) {
                                *dv += gv * bv;
                            }
                        });
                    }
                    if rg(*b) {
                        let ad = &nodes[*a].data;
                        acc(lo, *b, &mut |d| {
                            for ((dv, gv), av) in d.iter_mut().zip(g).zip(ad) {
                                *dv += gv * av;
                            }
                        });
                    }
                }
                Op::AffineScalar { x, mul, .. } => {
                    if rg(*x) {
                        let m = *mul;
                        acc(lo, *x, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += m * gv;
                            }
                        });
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let nn = nodes[*b].shape[1];
                    if rg(*a) {
                        // da[i,p] = sum_j g[i,j] * b[p,j]
                        let bd = &nodes[*b].data;
                        acc(lo, *a, &mut |d| {
                            for i2 in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    let gr = &g[i2 * nn..(i2 + 1) * nn];
                                    let br = &bd[p * nn..(p + 1) * nn];
                                    for (gv, bv) in gr.iter().zip(br) {
                                        s += gv * bv;
                                    }
                                    d[i2 * k + p] += s;
                                }
                            }
                        });
                    }
                    if rg(*b) {
                        // db[p,j] = sum_i a[i,p] * g[i,j]
                        let ad = &nodes[*a].data;
                        acc(lo, *b, &mut |d| {
                            for i2 in 0..m {
                                let gr = &g[i2 * nn..(i2 + 1) * nn];
                                for p in 0..k {
                                    let av = ad[i2 * k + p];
                                    if av != 0.0 {
                                        let dr = &mut d[p * nn..(p + 1) * nn];
                                        for (dv, gv) in dr.iter_mut().zip(gr) {
                                            *dv += av * gv;
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Transpose(x) => {
                    if rg(*x) {
                        let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                        acc(lo, *x, &mut |d| {
                            for i2 in 0..r {
                                for j in 0..c {
                                    d[i2 * c + j] += g[j * r + i2];
                                }
                            }
                        });
                    }
                }
                Op::Reshape(x) => {
                    if rg(*x) {
                        acc(lo, *x, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        });
                    }
                }
                Op::Relu(x) => {
                    if rg(*x) {
                        let xd = &nodes[*x].data;
                        acc(lo, *x, &mut |d| {
                            for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xd) {
                                if *xv > 0.0 {
                                    *dv += gv;
                                }
                            }
                        });
                    }
                }
                Op::Sigmoid(x) => {
                    if rg(*x) {
                        let sd = &self.nodes[i].data;
                        acc(lo, *x, &mut |d| {
                            for ((dv, gv), sv) in d.iter_mut().zip(g).zip(sd) {
                                *dv += gv * sv * (1.0 - sv);
                            }
                        });
                    }
                }
                Op::Softmax { x, axis } => {
                    if rg(*x) {
                        let s = &self.nodes[i].data;
                        let (outer, len, inner) = lane_geometry(&nodes[i].shape, *axis);
                        acc(lo, *x, &mut |d| {
                            for o in 0..outer {
                                for ii in 0..inner {
                                    let base = o * len * inner + ii;
                                    let mut dot = 0.0;
                                    for l in 0..len {
                                        let idx = base + l * inner;
                                        dot += g[idx] * s[idx];
                                    }
                                    for l in 0..len {
                                        let idx = base + l * inner;
                                        d[idx] += s[idx] * (g[idx] - dot);
                                    }
                                }
                            }
                        });
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    if rg(*x) {
                        let out = &self.nodes[i].data;
                        let (outer, len, inner) = lane_geometry(&nodes[i].shape, *axis);
                        acc(lo, *x, &mut |d| {
                            for o in 0..outer {
                                for ii in 0..inner {
                                    let base = o * len * inner + ii;
                                    let mut gsum = 0.0;
                                    for l in 0..len {
                                        gsum += g[base + l * inner];
                                    }
                                    for l in 0..len {
                                        let idx = base + l * inner;
                                        d[idx] += g[idx] - out[idx].exp() * gsum;
                                    }
                                }
                            }
                        });
                    }
                }
                Op::SumAll(x) => {
                    if rg(*x) {
                        let g0 = g[0];
                        acc(lo, *x, &mut |d| {
                            for dv in d.iter_mut() {
                                *dv += g0;
                            }
                        });
                    }
                }
                Op::MeanAll(x) => {
                    if rg(*x) {
                        let g0 = g[0] / nodes[*x].numel() as f64;
                        acc(lo, *x, &mut |d| {
                            for dv in d.iter_mut() {
                                *dv += g0;
                            }
                        });
                    }
                }
                Op::MaxAll { x, argmax } => {
                    if rg(*x) {
                        let g0 = g[0];
                        let am = *argmax;
                        acc(lo, *x, &mut |d| {
                            d[am] += g0;
                        });
                    }
                }
                Op::SumAxis { x, axis } => {
                    if rg(*x) {
                        let (outer, len, inner) = lane_geometry(&nodes[*x].shape, *axis);
                        acc(lo, *x, &mut |d| {
                            for o in 0..outer {
                                for l in 0..len {
                                    for ii in 0..inner {
                                        d[o * len * inner + l * inner + ii] += g[o * inner + ii];
                                    }
                                }
                            }
                        });
                    }
                }
                Op::GatherRows { x, indices } => {
                    if rg(*x) {
                        let row = nodes[*x].numel() / nodes[*x].shape[0].max(1);
                        acc(lo, *x, &mut |d| {
                            for (oi, &si) in indices.iter().enumerate() {
                                for j in 0..row {
                                    d[si * row + j] += g[oi * row + j];
                                }
                            }
                        });
                    }
                }
                Op::ScatterAddRows { x, indices } => {
                    if rg(*x) {
                        let row = nodes[*x].numel() / nodes[*x].shape[0].max(1);
                        acc(lo, *x, &mut |d| {
                            for (si, &oi) in indices.iter().enumerate() {
                                for j in 0..row {
                                    d[si * row + j] += g[oi * row + j];
                                }
                            }
                        });
                    }
                }
                Op::GatherElems { x, cols } => {
                    if rg(*x) {
                        let c = nodes[*x].shape[1];
                        acc(lo, *x, &mut |d| {
                            for (i2, &j) in cols.iter().enumerate() {
                                d[i2 * c + j] += g[i2];
                            }
                        });
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (c1, c2) = (nodes[*a].shape[1], nodes[*b].shape[1]);
                    let n2 = nodes[*a].shape[0];
                    if rg(*a) {
                        acc(lo, *a, &mut |d| {
                            for i2 in 0..n2 {
                                for j in 0..c1 {
                                    d[i2 * c1 + j] += g[i2 * (c1 + c2) + j];
                                }
                            }
                        });
                    }
                    if rg(*b) {
                        acc(lo, *b, &mut |d| {
                            for i2 in 0..n2 {
                                for j in 0..c2 {
                                    d[i2 * c2 + j] += g[i2 * (c1 + c2) + c1 + j];
                                }
                            }
                        });
                    }
                }
                Op::WeightedGather { x, indices, weights, k } => {
                    if rg(*x) {
                        let c = nodes[*x].shape[1];
                        let q = indices.len() / k;
                        acc(lo, *x, &mut |d| {
                            for i2 in 0..q {
                                for j in 0..*k {
                                    let w = weights[i2 * k + j];
                                    let r = indices[i2 * k + j];
                                    for dd in 0..c {
                                        d[r * c + dd] += w * g[i2 * c + dd];
                                    }
                                }
                            }
                        });
                    }
                }
                Op::ScaleBy { x, s } => {
                    if rg(*x) {
                        let sv = nodes[*s].data[0];
                        acc(lo, *x, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += sv * gv;
                            }
                        });
                    }
                    if rg(*s) {
                        let xd = &nodes[*x].data;
                        let mut dot = 0.0;
                        for (gv, xv) in g.iter().zip(xd) {
                            dot += gv * xv;
                        }
                        acc(lo, *s, &mut |d| {
                            d[0] += dot;
                        });
                    }
                }
                Op::AddRowVec { x, v } => {
                    let (n2, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                    if rg(*x) {
                        acc(lo, *x, &mut |d| {
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += gv;
                            }
                        });
                    }
                    if rg(*v) {
                        acc(lo, *v, &mut |d| {
                            for i2 in 0..n2 {
                                for j in 0..c {
                                    d[j] += g[i2 * c + j];
                                }
                            }
                        });
                    }
                }
                Op::HuberSum(x) => {
                    if rg(*x) {
                        let g0 = g[0];
                        let xd = &nodes[*x].data;
                        acc(lo, *x, &mut |d| {
                            for (dv, xv) in d.iter_mut().zip(xd) {
                                *dv += g0 * xv.clamp(-1.0, 1.0);
                            }
                        });
                    }
                }
                Op::SegmentSoftmax { x, segments } => {
                    if rg(*x) {
                        let s = &self.nodes[i].data;
                        let c = nodes[*x].shape[1];
                        acc(lo, *x, &mut |d| {
                            let mut base = 0;
                            for &len in segments {
                                for j in 0..c {
                                    let mut dot = 0.0;
                                    for l in 0..len {
                                        let idx = (base + l) * c + j;
                                        dot += g[idx] * s[idx];
                                    }
                                    for l in 0..len {
                                        let idx = (base + l) * c + j;
                                        d[idx] += s[idx] * (g[idx] - dot);
                                    }
                                }
                                base += len;
                            }
                        });
                    }
                }
                Op::SegmentSum { x, segments } => {
                    if rg(*x) {
                        let c = nodes[*x].shape[1];
                        acc(lo, *x, &mut |d| {
                            let mut base = 0;
                            for (si, &len) in segments.iter().enumerate() {
                                for l in 0..len {
                                    for j in 0..c {
                                        d[(base + l) * c + j] += g[si * c + j];
                                    }
                                }
                                base += len;
                            }
                        });
                    }
                }
            }
        }

        // Merge this sweep's adjoints into the persistent accumulators.
        for (node, a) in self.nodes.iter_mut().zip(adj.into_iter()) {
            if let Some(a) = a {
                match &mut node.grad {
                    Some(gacc) => {
                        for (gv, av) in gacc.iter_mut().zip(&a) {
                            *gv += av;
                        }
                    }
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }
}

/// Row-major matrix product, accumulated in a fixed i-k-j order.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}
