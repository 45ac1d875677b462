//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints. Gradients persist across backward calls (repeated
//! backward without [`Tape::zero_grad`] accumulates), matching the usual
//! deep-learning convention.
//!
//! Tapes are deliberately single-threaded; training holds one tape per step
//! and inference reads plain tensors.

use alloc::rc::Rc;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Debug, PartialEq)]
pub enum AdError {
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    NonScalarLoss {
        shape: (usize, usize),
    },
    IndexOutOfRange {
        op: &'static str,
    },
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            AdError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got {}x{}", shape.0, shape.1)
            }
            AdError::IndexOutOfRange { op } => write!(f, "{op}: index out of range"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AdError {}

/// Sparse linear row map: `out[dst] += w * in[src]` over all triples. Used
/// by the downscale/upscale feature operators; the transpose map is the
/// exact adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMapPlan {
    pub in_rows: usize,
    pub out_rows: usize,
    /// (destination row, source row, weight), sorted by destination then
    /// source so application order is deterministic.
    pub triples: Vec<(u32, u32, f64)>,
}

enum Op {
    Input,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddRowBroadcast(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    SigmoidCol(TensorId, usize),
    Sum(TensorId),
    SliceCols(TensorId, usize, usize),
    ConcatCols(Vec<TensorId>),
    GatherRows(TensorId, Rc<Vec<u32>>),
    ScatterAddRows(TensorId, Rc<Vec<u32>>),
    RowSum(TensorId),
    MulColBroadcast(TensorId, TensorId),
    SegmentSoftmax(TensorId, Rc<Vec<u32>>),
    RowMap(TensorId, Rc<RowMapPlan>),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Persistent gradient accumulator, lazily allocated.
    grad: Option<Vec<f64>>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a leaf tensor (parameter or data).
    pub fn input(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Input, value)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a node; zeros if backward never reached it.
    pub fn grad(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        let (r, c) = node.value.shape();
        match &node.grad {
            Some(g) => Tensor::from_vec(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let value = matmul(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(TensorId, TensorId) -> Op,
    ) -> Result<TensorId, AdError> {
        let (ar, ac) = self.shape(a);
        if self.shape(b) != (ar, ac) {
            return Err(AdError::ShapeMismatch {
                op: op_name,
                lhs: (ar, ac),
                rhs: self.shape(b),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ar, ac, data);
        Ok(self.push(op(a, b), value))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a` is n x d, `bias` is 1 x d, added to every row.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, AdError> {
        let (n, d) = self.shape(a);
        if self.shape(bias) != (1, d) {
            return Err(AdError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: (n, d),
                rhs: self.shape(bias),
            });
        }
        let bias_row: Vec<f64> = self.value(bias).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + bias_row[idx % d])
            .collect();
        let value = Tensor::from_vec(n, d, data);
        Ok(self.push(Op::AddRowBroadcast(a, bias), value))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let data = self.value(a).iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(r, cl, data);
        self.push(Op::Scale(a, c), value)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_vec(r, c, data);
        self.push(Op::Relu(a), value)
    }

    /// Applies the logistic function to one column, leaving others linear.
    pub fn sigmoid_col(&mut self, a: TensorId, col: usize) -> Result<TensorId, AdError> {
        let (r, c) = self.shape(a);
        if col >= c {
            return Err(AdError::IndexOutOfRange { op: "sigmoid_col" });
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            let v = &mut data[i * c + col];
            *v = sigmoid(*v);
        }
        let value = Tensor::from_vec(r, c, data);
        Ok(self.push(Op::SigmoidCol(a, col), value))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.value(a).iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, AdError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(AdError::IndexOutOfRange { op: "slice_cols" });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(r, len, data);
        Ok(self.push(Op::SliceCols(a, start, len), value))
    }

    /// Concatenates tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, AdError> {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(AdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (r, 0),
                    rhs: (pr, pc),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::from_vec(r, total, data);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Rows of `a` selected by `indices` (with repetition).
    pub fn gather_rows(
        &mut self,
        a: TensorId,
        indices: Rc<Vec<u32>>,
    ) -> Result<TensorId, AdError> {
        let (n, d) = self.shape(a);
        if indices.iter().any(|&i| i as usize >= n) {
            return Err(AdError::IndexOutOfRange { op: "gather_rows" });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices.iter() {
            data.extend_from_slice(src.row(i as usize));
        }
        let value = Tensor::from_vec(indices.len(), d, data);
        Ok(self.push(Op::GatherRows(a, indices), value))
    }

    /// Accumulates row e of `a` into output row `indices[e]`; the output has
    /// `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: TensorId,
        indices: Rc<Vec<u32>>,
        out_rows: usize,
    ) -> Result<TensorId, AdError> {
        let (e, d) = self.shape(a);
        if indices.len() != e || indices.iter().any(|&i| i as usize >= out_rows) {
            return Err(AdError::IndexOutOfRange {
                op: "scatter_add_rows",
            });
        }
        let src = self.value(a);
        let mut data = alloc::vec![0.0; out_rows * d];
        for (row, &dst) in indices.iter().enumerate() {
            let s = src.row(row);
            let o = &mut data[dst as usize * d..(dst as usize + 1) * d];
            for (ov, &sv) in o.iter_mut().zip(s) {
                *ov += sv;
            }
        }
        let value = Tensor::from_vec(out_rows, d, data);
        Ok(self.push(Op::ScatterAddRows(a, indices), value))
    }

    /// Per-row sum, n x d -> n x 1.
    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (n, _) = self.shape(a);
        let data = (0..n).map(|i| self.value(a).row(i).iter().sum()).collect();
        let value = Tensor::from_vec(n, 1, data);
        self.push(Op::RowSum(a), value)
    }

    /// Scales row i of `a` (n x d) by `s[i]` (n x 1).
    pub fn mul_col_broadcast(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, AdError> {
        let (n, d) = self.shape(a);
        if self.shape(s) != (n, 1) {
            return Err(AdError::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: (n, d),
                rhs: self.shape(s),
            });
        }
        let scales = self.value(s).data().to_vec();
        let src = self.value(a);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let si = scales[i];
            data.extend(src.row(i).iter().map(|&x| x * si));
        }
        let value = Tensor::from_vec(n, d, data);
        Ok(self.push(Op::MulColBroadcast(a, s), value))
    }

    /// Softmax of `scores` (e x 1) grouped by `segments[e]` (any order; the
    /// number of segments is `max(segments) + 1`). Stabilized by per-segment
    /// max subtraction; each segment's outputs sum to one. All reductions
    /// visit edges in positional order, so a consistent relabeling of
    /// segments and rows reproduces results bit-exactly.
    pub fn segment_softmax(
        &mut self,
        scores: TensorId,
        segments: Rc<Vec<u32>>,
    ) -> Result<TensorId, AdError> {
        let (e, c) = self.shape(scores);
        if c != 1 || segments.len() != e {
            return Err(AdError::ShapeMismatch {
                op: "segment_softmax",
                lhs: (e, c),
                rhs: (segments.len(), 1),
            });
        }
        let n = segments.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
        let src = self.value(scores).data();
        let mut seg_max = alloc::vec![f64::NEG_INFINITY; n];
        for (&s, &v) in segments.iter().zip(src) {
            let m = &mut seg_max[s as usize];
            *m = m.max(v);
        }
        let mut data = alloc::vec![0.0; e];
        let mut seg_total = alloc::vec![0.0; n];
        for (k, (&s, &v)) in segments.iter().zip(src).enumerate() {
            let w = fmath::exp(v - seg_max[s as usize]);
            data[k] = w;
            seg_total[s as usize] += w;
        }
        for (v, &s) in data.iter_mut().zip(segments.iter()) {
            *v /= seg_total[s as usize];
        }
        let value = Tensor::from_vec(e, 1, data);
        Ok(self.push(Op::SegmentSoftmax(scores, segments), value))
    }

    /// Applies a sparse linear row map (see [`RowMapPlan`]).
    pub fn row_map(&mut self, a: TensorId, plan: Rc<RowMapPlan>) -> Result<TensorId, AdError> {
        let (n, d) = self.shape(a);
        if n != plan.in_rows {
            return Err(AdError::ShapeMismatch {
                op: "row_map",
                lhs: (n, d),
                rhs: (plan.in_rows, d),
            });
        }
        let src = self.value(a);
        let mut data = alloc::vec![0.0; plan.out_rows * d];
        for &(dst, s, w) in &plan.triples {
            let srow = src.row(s as usize);
            let orow = &mut data[dst as usize * d..(dst as usize + 1) * d];
            for (ov, &sv) in orow.iter_mut().zip(srow) {
                *ov += w * sv;
            }
        }
        let value = Tensor::from_vec(plan.out_rows, d, data);
        Ok(self.push(Op::RowMap(a, plan), value))
    }

    /// Reverse pass from a scalar loss. Adjoints of this pass are added into
    /// each node's persistent gradient accumulator.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AdError> {
        if self.shape(loss) != (1, 1) {
            return Err(AdError::NonScalarLoss {
                shape: self.shape(loss),
            });
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(alloc::vec![1.0]);

        for i in (0..n).rev() {
            let Some(out_grad) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &out_grad, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&out_grad) {
                        *a += g;
                    }
                }
                None => node.grad = Some(out_grad),
            }
        }
        Ok(())
    }

    /// Adds `out_grad`-weighted input adjoints of node `i` into `adj`.
    fn propagate(&self, i: usize, out_grad: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let dims = |id: TensorId| self.nodes[id.0].value.len();
        let mut accum = |id: TensorId, contribution: Vec<f64>| {
            debug_assert_eq!(contribution.len(), dims(id));
            match &mut adj[id.0] {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&contribution) {
                        *a += g;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (ar, ac) = self.nodes[a.0].value.shape();
                let (_, bc) = self.nodes[b.0].value.shape();
                let g = Tensor::from_vec(ar, bc, out_grad.to_vec());
                let da = matmul_nt(&g, &self.nodes[b.0].value);
                let db = matmul_tn(&self.nodes[a.0].value, &g);
                debug_assert_eq!(da.shape(), (ar, ac));
                accum(*a, da.data().to_vec());
                accum(*b, db.data().to_vec());
            }
            Op::Add(a, b) => {
                accum(*a, out_grad.to_vec());
                accum(*b, out_grad.to_vec());
            }
            Op::Sub(a, b) => {
                accum(*a, out_grad.to_vec());
                accum(*b, out_grad.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                accum(*a, out_grad.iter().zip(bv).map(|(g, &v)| g * v).collect());
                accum(*b, out_grad.iter().zip(av).map(|(g, &v)| g * v).collect());
            }
            Op::AddRowBroadcast(a, bias) => {
                accum(*a, out_grad.to_vec());
                let d = self.nodes[bias.0].value.cols();
                let mut bg = alloc::vec![0.0; d];
                for (idx, g) in out_grad.iter().enumerate() {
                    bg[idx % d] += g;
                }
                accum(*bias, bg);
            }
            Op::Scale(a, c) => {
                accum(*a, out_grad.iter().map(|g| g * c).collect());
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                accum(
                    *a,
                    out_grad
                        .iter()
                        .zip(av)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::SigmoidCol(a, col) => {
                let out = self.nodes[i].value.data();
                let c = self.nodes[i].value.cols();
                accum(
                    *a,
                    out_grad
                        .iter()
                        .enumerate()
                        .map(|(idx, g)| {
                            if idx % c == *col {
                                let s = out[idx];
                                g * s * (1.0 - s)
                            } else {
                                *g
                            }
                        })
                        .collect(),
                );
            }
            Op::Sum(a) => {
                let g = out_grad[0];
                accum(*a, alloc::vec![g; dims(*a)]);
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = self.nodes[a.0].value.shape();
                let mut ga = alloc::vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..*len {
                        ga[i2 * c + start + j] = out_grad[i2 * len + j];
                    }
                }
                accum(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(r * pc);
                    for i2 in 0..r {
                        let row = &out_grad[i2 * total + offset..i2 * total + offset + pc];
                        gp.extend_from_slice(row);
                    }
                    accum(p, gp);
                    offset += pc;
                }
            }
            Op::GatherRows(a, indices) => {
                let (n, d) = self.nodes[a.0].value.shape();
                let mut ga = alloc::vec![0.0; n * d];
                for (row, &src) in indices.iter().enumerate() {
                    let g = &out_grad[row * d..(row + 1) * d];
                    let o = &mut ga[src as usize * d..(src as usize + 1) * d];
                    for (ov, gv) in o.iter_mut().zip(g) {
                        *ov += gv;
                    }
                }
                accum(*a, ga);
            }
            Op::ScatterAddRows(a, indices) => {
                let (e, d) = self.nodes[a.0].value.shape();
                let mut ga = Vec::with_capacity(e * d);
                for &dst in indices.iter() {
                    ga.extend_from_slice(&out_grad[dst as usize * d..(dst as usize + 1) * d]);
                }
                accum(*a, ga);
            }
            Op::RowSum(a) => {
                let (n, d) = self.nodes[a.0].value.shape();
                let mut ga = Vec::with_capacity(n * d);
                for i2 in 0..n {
                    ga.extend(core::iter::repeat(out_grad[i2]).take(d));
                }
                accum(*a, ga);
            }
            Op::MulColBroadcast(a, s) => {
                let (n, d) = self.nodes[a.0].value.shape();
                let av = self.nodes[a.0].value.data();
                let sv = self.nodes[s.0].value.data();
                let mut ga = Vec::with_capacity(n * d);
                let mut gs = alloc::vec![0.0; n];
                for i2 in 0..n {
                    let si = sv[i2];
                    for j in 0..d {
                        let g = out_grad[i2 * d + j];
                        ga.push(g * si);
                        gs[i2] += g * av[i2 * d + j];
                    }
                }
                accum(*a, ga);
                accum(*s, gs);
            }
            Op::SegmentSoftmax(scores, segments) => {
                // d loss / d score_j = a_j * (g_j - sum_k a_k g_k) per segment.
                let out = self.nodes[i].value.data();
                let e = out.len();
                let n = segments.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
                let mut seg_dot = alloc::vec![0.0; n];
                for (k, &s) in segments.iter().enumerate() {
                    seg_dot[s as usize] += out[k] * out_grad[k];
                }
                let mut ga = alloc::vec![0.0; e];
                for (k, &s) in segments.iter().enumerate() {
                    ga[k] = out[k] * (out_grad[k] - seg_dot[s as usize]);
                }
                accum(*scores, ga);
            }
            Op::RowMap(a, plan) => {
                let (n, d) = self.nodes[a.0].value.shape();
                let mut ga = alloc::vec![0.0; n * d];
                for &(dst, src, w) in &plan.triples {
                    let g = &out_grad[dst as usize * d..(dst as usize + 1) * d];
                    let o = &mut ga[src as usize * d..(src as usize + 1) * d];
                    for (ov, gv) in o.iter_mut().zip(g) {
                        *ov += w * gv;
                    }
                }
                accum(*a, ga);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fmath::exp(-x))
    } else {
        let e = fmath::exp(x);
        e / (1.0 + e)
    }
}
