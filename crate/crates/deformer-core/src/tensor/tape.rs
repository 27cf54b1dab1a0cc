//! The recording tape: forward evaluation plus reverse-mode gradients.
//!
//! A [`Tape`] owns a flat list of nodes. Each builder method validates
//! shapes, evaluates the result eagerly with a fixed summation order, records
//! the operation's FLOP cost, and returns a [`NodeId`] handle. Gradients flow
//! backwards through the recorded graph with [`Tape::backward`].

use super::flops;
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied inside [`Tape::ln`]. Inputs at or below this value
/// produce `ln(LN_INPUT_FLOOR)` with a zero gradient, so a probability that
/// underflows to zero yields a large-but-finite loss instead of `-inf`.
/// NaN inputs pass through untouched — the clamp must not mask divergence.
pub const LN_INPUT_FLOOR: f64 = 1e-300;

/// `sqrt(2/pi)`, the leading constant of the tanh GELU approximation.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Cubic coefficient of the tanh GELU approximation.
const GELU_CUBIC_COEFF: f64 = 0.044715;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Ln(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Softmax {
        x: NodeId,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    /// Target shape lives in the node's stored value.
    Reshape(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient data for `id`, if any path reached it. A parameter the loss
    /// never touched has no entry.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient for `id` as a tensor shaped like its value; zeros when the
    /// loss did not depend on it.
    pub fn wrt(&self, id: NodeId, tape: &Tape) -> Tensor {
        let shape = tape.value(id).shape().to_vec();
        match self.grads[id.0].as_ref() {
            Some(g) => Tensor::raw(shape, g.clone(), Precision::F64),
            None => Tensor::zeros(shape),
        }
    }
}

/// Records operations and evaluates them eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), precision: Precision::F64 }
    }

    /// Tape whose op outputs are rounded through the given precision.
    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Stored value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records a constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Records a trainable input; [`Tape::backward`] accumulates into it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(&op, None)?;
        flops::record(self.op_flops(&op, &value));
        let rg = self.any_grad(inputs);
        Ok(self.push(op, value, rg))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn want_matrix(&self, id: NodeId, ctx: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{ctx}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ---- builders ---------------------------------------------------------

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ka) = self.want_matrix(a, "matmul lhs")?;
        let (kb, _) = self.want_matrix(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.record(Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_matrix(x, "transpose")?;
        self.record(Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "add")?;
        self.record(Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "sub")?;
        self.record(Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "mul")?;
        self.record(Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(x, c), &[x])
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, n) = self.want_matrix(x, "add_row")?;
        let rs = self.shape(row);
        if rs != [n] {
            return Err(Error::Shape(format!(
                "add_row: row shape {rs:?} does not match matrix columns {n}"
            )));
        }
        self.record(Op::AddRow(x, row), &[x, row])
    }

    /// Natural log with the input clamped at [`LN_INPUT_FLOOR`]; the clamp
    /// region has zero gradient.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Ln(x), &[x])
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Gelu(x), &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias,
    /// using the biased variance and `eps` added under the square root.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x);
        let n = *xs.last().ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} must both be [{n}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
        }
        self.record(Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_inner(x, axis, None)
    }

    /// Softmax along `axis` with an elementwise validity mask (same layout
    /// as `x`). Masked positions get probability exactly `0.0`; a lane with
    /// no valid position is an input error.
    pub fn softmax_masked(&mut self, x: NodeId, axis: usize, mask: &[bool]) -> Result<NodeId> {
        self.softmax_inner(x, axis, Some(mask.to_vec()))
    }

    fn softmax_inner(&mut self, x: NodeId, axis: usize, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let xs = self.shape(x);
        if axis >= xs.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {xs:?}")));
        }
        if let Some(m) = &mask {
            if m.len() != self.nodes[x.0].value.numel() {
                return Err(Error::Shape(format!(
                    "softmax mask has {} entries for tensor of {}",
                    m.len(),
                    self.nodes[x.0].value.numel()
                )));
            }
        }
        self.record(Op::Softmax { x, axis, mask }, &[x])
    }

    /// Selects rows of a matrix by index, duplicates allowed. Gradients
    /// scatter-add back into the source rows.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, _) = self.want_matrix(table, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        self.record(Op::GatherRows { table, indices: indices.to_vec() }, &[table])
    }

    /// Contiguous row range `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, _) = self.want_matrix(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} invalid for {rows} rows"
            )));
        }
        self.record(Op::SliceRows { x, start, end }, &[x])
    }

    /// Contiguous column range `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (_, cols) = self.want_matrix(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} invalid for {cols} columns"
            )));
        }
        self.record(Op::SliceCols { x, start, end }, &[x])
    }

    /// Stacks two matrices with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ca) = self.want_matrix(a, "concat_rows lhs")?;
        let (_, cb) = self.want_matrix(b, "concat_rows rhs")?;
        if ca != cb {
            return Err(Error::Shape(format!(
                "concat_rows column mismatch: {ca} vs {cb}"
            )));
        }
        self.record(Op::ConcatRows(a, b), &[a, b])
    }

    /// Joins two matrices with equal row counts side by side, `a` first.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, _) = self.want_matrix(a, "concat_cols lhs")?;
        let (rb, _) = self.want_matrix(b, "concat_cols rhs")?;
        if ra != rb {
            return Err(Error::Shape(format!("concat_cols row mismatch: {ra} vs {rb}")));
        }
        self.record(Op::ConcatCols(a, b), &[a, b])
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel = self.nodes[x.0].value.numel();
        if shape.iter().product::<usize>() != numel {
            return Err(Error::Shape(format!(
                "reshape to {shape:?} changes element count from {numel}"
            )));
        }
        let value = Tensor::raw(shape, self.nodes[x.0].value.data().to_vec(), self.precision);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x), &[x])
    }

    fn want_same_shape(&self, a: NodeId, b: NodeId, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{ctx}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- evaluation -------------------------------------------------------

    /// Evaluates `op` against current node values. `reshaped` supplies the
    /// stored output shape for reshape nodes during replay.
    fn eval(&self, op: &Op, reshaped: Option<&[usize]>) -> Result<Tensor> {
        let t = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (t(a), t(b));
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                let mut out = vec![0.0; m * n];
                // i,k,j order: for each output element the k-sum still runs
                // ascending, so the result is independent of this nesting.
                for i in 0..m {
                    for kk in 0..k {
                        let av = a.data()[i * k + kk];
                        let brow = &b.data()[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
                Tensor::raw(vec![m, n], out, self.precision)
            }
            Op::Transpose(x) => {
                let x = t(x);
                let (m, n) = (x.rows(), x.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = x.data()[i * n + j];
                    }
                }
                Tensor::raw(vec![n, m], out, self.precision)
            }
            Op::Add(a, b) => self.zip(t(a), t(b), |x, y| x + y),
            Op::Sub(a, b) => self.zip(t(a), t(b), |x, y| x - y),
            Op::Mul(a, b) => self.zip(t(a), t(b), |x, y| x * y),
            Op::Scale(x, c) => self.map(t(x), |v| v * c),
            Op::AddRow(x, row) => {
                let (x, row) = (t(x), t(row));
                let (m, n) = (x.rows(), x.cols());
                let mut out = x.data().to_vec();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += row.data()[j];
                    }
                }
                Tensor::raw(vec![m, n], out, self.precision)
            }
            Op::Ln(x) => self.map(t(x), |v| {
                // Written as a comparison (not f64::max) so NaN propagates.
                if v < LN_INPUT_FLOOR {
                    LN_INPUT_FLOOR.ln()
                } else {
                    v.ln()
                }
            }),
            Op::Gelu(x) => self.map(t(x), gelu_scalar),
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias) = (t(x), t(gain), t(bias));
                let n = *x.shape().last().unwrap();
                let mut out = vec![0.0; x.numel()];
                for (lane, olane) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                    let (mean, inv) = lane_stats(lane, *eps);
                    for j in 0..n {
                        olane[j] = (lane[j] - mean) * inv * gain.data()[j] + bias.data()[j];
                    }
                }
                Tensor::raw(x.shape().to_vec(), out, self.precision)
            }
            Op::Softmax { x, axis, mask } => {
                let x = t(x);
                let mut out = vec![0.0; x.numel()];
                for lane in LaneIter::new(x.shape(), *axis) {
                    softmax_lane(x.data(), &mut out, &lane, mask.as_deref())?;
                }
                Tensor::raw(x.shape().to_vec(), out, self.precision)
            }
            Op::GatherRows { table, indices } => {
                let table = t(table);
                let n = table.cols();
                let mut out = Vec::with_capacity(indices.len() * n);
                for &r in indices {
                    out.extend_from_slice(table.row(r));
                }
                Tensor::raw(vec![indices.len(), n], out, self.precision)
            }
            Op::SliceRows { x, start, end } => {
                let x = t(x);
                let n = x.cols();
                let out = x.data()[start * n..end * n].to_vec();
                Tensor::raw(vec![end - start, n], out, self.precision)
            }
            Op::SliceCols { x, start, end } => {
                let x = t(x);
                let (m, n) = (x.rows(), x.cols());
                let w = end - start;
                let mut out = Vec::with_capacity(m * w);
                for i in 0..m {
                    out.extend_from_slice(&x.data()[i * n + start..i * n + end]);
                }
                Tensor::raw(vec![m, w], out, self.precision)
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (t(a), t(b));
                let mut out = a.data().to_vec();
                out.extend_from_slice(b.data());
                Tensor::raw(vec![a.rows() + b.rows(), a.cols()], out, self.precision)
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (t(a), t(b));
                let (m, na, nb) = (a.rows(), a.cols(), b.cols());
                let mut out = Vec::with_capacity(m * (na + nb));
                for i in 0..m {
                    out.extend_from_slice(a.row(i));
                    out.extend_from_slice(b.row(i));
                }
                Tensor::raw(vec![m, na + nb], out, self.precision)
            }
            Op::Reshape(x) => {
                let shape = reshaped.expect("reshape replay needs stored shape").to_vec();
                Tensor::raw(shape, t(x).data().to_vec(), self.precision)
            }
            Op::Sum(x) => {
                let mut acc = 0.0;
                for v in t(x).data() {
                    acc += v;
                }
                Tensor::raw(vec![1], vec![acc], self.precision)
            }
        };
        Ok(out.finish())
    }

    fn zip(&self, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::raw(a.shape().to_vec(), data, self.precision)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let data = x.data().iter().map(|&v| f(v)).collect();
        Tensor::raw(x.shape().to_vec(), data, self.precision)
    }

    /// FLOP cost of one op. Masked softmax lanes are charged at full width,
    /// matching the dense analytic model in the metering module.
    fn op_flops(&self, op: &Op, out: &Tensor) -> u64 {
        let numel = out.numel() as u64;
        match op {
            Op::Leaf
            | Op::Transpose(_)
            | Op::GatherRows { .. }
            | Op::SliceRows { .. }
            | Op::SliceCols { .. }
            | Op::ConcatRows(..)
            | Op::ConcatCols(..)
            | Op::Reshape(_) => 0,
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0] as u64, self.shape(*a)[1] as u64);
                let n = self.shape(*b)[1] as u64;
                2 * m * k * n
            }
            Op::Add(..) | Op::Sub(..) | Op::Mul(..) | Op::Scale(..) | Op::AddRow(..) => numel,
            Op::Ln(_) => numel * flops::LN_FLOPS_PER_ELEM,
            Op::Gelu(_) => numel * flops::GELU_FLOPS_PER_ELEM,
            Op::LayerNorm { .. } => numel * flops::LAYER_NORM_FLOPS_PER_ELEM,
            Op::Softmax { .. } => numel * flops::SOFTMAX_FLOPS_PER_ELEM,
            Op::Sum(x) => self.nodes[x.0].value.numel() as u64,
        }
    }

    /// Re-executes every recorded op and checks the stored values are
    /// reproduced bit for bit. Leaves FLOP counters untouched.
    pub fn replay_check(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let recomputed = self.eval(&node.op, Some(node.value.shape()))?;
            if !recomputed.bit_eq(&node.value) {
                return Err(Error::Numerical(format!(
                    "replay of node {i} diverged from the recorded value"
                )));
            }
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode gradients of a scalar output with respect to every node
    /// marked with [`Tape::param`]. Nodes the output does not depend on get
    /// no entry.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = &self.nodes[output.0].value;
        if out_val.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let go = grads[i].take().unwrap();
            self.propagate(i, &go, &mut grads)?;
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let t = |id: &NodeId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (t(a), t(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                self.acc(grads, *a, |da| {
                    for ii in 0..m {
                        for j in 0..n {
                            let g = go[ii * n + j];
                            for l in 0..k {
                                da[ii * k + l] += g * bv.data()[l * n + j];
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for l in 0..k {
                        for ii in 0..m {
                            let x = av.data()[ii * k + l];
                            for j in 0..n {
                                db[l * n + j] += x * go[ii * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, m) = (t(x).rows(), t(x).cols());
                self.acc(grads, *x, |dx| {
                    for ii in 0..m {
                        for j in 0..n {
                            dx[j * m + ii] += go[ii * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |da| axpy(da, go, 1.0));
                self.acc(grads, *b, |db| axpy(db, go, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |da| axpy(da, go, 1.0));
                self.acc(grads, *b, |db| axpy(db, go, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (t(a).data(), t(b).data());
                self.acc(grads, *a, |da| {
                    for (d, (g, y)) in da.iter_mut().zip(go.iter().zip(bv)) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |db| {
                    for (d, (g, x)) in db.iter_mut().zip(go.iter().zip(av)) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |dx| axpy(dx, go, *c)),
            Op::AddRow(x, row) => {
                let n = t(row).numel();
                self.acc(grads, *x, |dx| axpy(dx, go, 1.0));
                self.acc(grads, *row, |dr| {
                    for (j, d) in dr.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for chunk in go.chunks(n) {
                            s += chunk[j];
                        }
                        *d += s;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = t(x).data();
                self.acc(grads, *x, |dx| {
                    for (d, (g, &v)) in dx.iter_mut().zip(go.iter().zip(xv)) {
                        // NaN deliberately falls into the live branch so a
                        // poisoned forward value also poisons the gradient.
                        if !(v < LN_INPUT_FLOOR) {
                            *d += g / v;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = t(x).data();
                self.acc(grads, *x, |dx| {
                    for (d, (g, &v)) in dx.iter_mut().zip(go.iter().zip(xv)) {
                        *d += g * gelu_derivative(v);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gv) = (t(x), t(gain));
                let n = *xv.shape().last().unwrap();
                let lanes = xv.numel() / n;
                // Recompute per-lane statistics; cheaper than storing them.
                let mut xhat = vec![0.0; xv.numel()];
                let mut invs = vec![0.0; lanes];
                for (li, lane) in xv.data().chunks(n).enumerate() {
                    let (mean, inv) = lane_stats(lane, *eps);
                    invs[li] = inv;
                    for j in 0..n {
                        xhat[li * n + j] = (lane[j] - mean) * inv;
                    }
                }
                self.acc(grads, *gain, |dg| {
                    for li in 0..lanes {
                        for j in 0..n {
                            dg[j] += go[li * n + j] * xhat[li * n + j];
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for li in 0..lanes {
                        for j in 0..n {
                            db[j] += go[li * n + j];
                        }
                    }
                });
                self.acc(grads, *x, |dx| {
                    for li in 0..lanes {
                        let base = li * n;
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let dxh = go[base + j] * gv.data()[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[base + j];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let dxh = go[base + j] * gv.data()[j];
                            dx[base + j] +=
                                invs[li] * (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Softmax { x, axis, .. } => {
                let y = &self.nodes[i].value;
                let shape = y.shape().to_vec();
                let yd = y.data();
                self.acc(grads, *x, |dx| {
                    for lane in LaneIter::new(&shape, *axis) {
                        let mut dot = 0.0;
                        for idx in lane.clone() {
                            dot += yd[idx] * go[idx];
                        }
                        for idx in lane {
                            dx[idx] += yd[idx] * (go[idx] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let n = t(table).cols();
                self.acc(grads, *table, |dt| {
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..n {
                            dt[src * n + j] += go[r * n + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start, .. } => {
                let n = t(x).cols();
                self.acc(grads, *x, |dx| {
                    axpy(&mut dx[start * n..start * n + go.len()], go, 1.0);
                });
            }
            Op::SliceCols { x, start, end } => {
                let (m, n) = (t(x).rows(), t(x).cols());
                let w = end - start;
                self.acc(grads, *x, |dx| {
                    for ii in 0..m {
                        for j in 0..w {
                            dx[ii * n + start + j] += go[ii * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = t(a).numel();
                self.acc(grads, *a, |da| axpy(da, &go[..split], 1.0));
                self.acc(grads, *b, |db| axpy(db, &go[split..], 1.0));
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = (t(a).rows(), t(a).cols());
                let nb = t(b).cols();
                let w = na + nb;
                self.acc(grads, *a, |da| {
                    for ii in 0..m {
                        axpy(&mut da[ii * na..(ii + 1) * na], &go[ii * w..ii * w + na], 1.0);
                    }
                });
                self.acc(grads, *b, |db| {
                    for ii in 0..m {
                        axpy(&mut db[ii * nb..(ii + 1) * nb], &go[ii * w + na..(ii + 1) * w], 1.0);
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |dx| axpy(dx, go, 1.0)),
            Op::Sum(x) => {
                let g = go[0];
                self.acc(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEFF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Mean and inverse standard deviation of one normalization lane, with the
/// biased (divide by `n`) variance.
fn lane_stats(lane: &[f64], eps: f64) -> (f64, f64) {
    let n = lane.len() as f64;
    let mut mean = 0.0;
    for &v in lane {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in lane {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Writes one softmax lane of `out`, reading `x` at `lane`'s indices.
fn softmax_lane(
    x: &[f64],
    out: &mut [f64],
    lane: &LaneIndices,
    mask: Option<&[bool]>,
) -> Result<()> {
    let valid = |idx: usize| mask.map_or(true, |m| m[idx]);
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for idx in lane.clone() {
        if valid(idx) {
            any = true;
            if x[idx] > max {
                max = x[idx];
            }
        }
    }
    if !any {
        return Err(Error::Input("softmax lane has no unmasked position".into()));
    }
    let mut z = 0.0;
    for idx in lane.clone() {
        if valid(idx) {
            let e = (x[idx] - max).exp();
            out[idx] = e;
            z += e;
        } else {
            out[idx] = 0.0;
        }
    }
    for idx in lane.clone() {
        if valid(idx) {
            out[idx] /= z;
        }
    }
    Ok(())
}

/// Flat indices of one lane along a chosen axis.
#[derive(Debug, Clone)]
struct LaneIndices {
    base: usize,
    stride: usize,
    len: usize,
    next: usize,
}

impl Iterator for LaneIndices {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.next >= self.len {
            return None;
        }
        let idx = self.base + self.next * self.stride;
        self.next += 1;
        Some(idx)
    }
}

/// Iterates every lane of a shape along `axis`.
struct LaneIter {
    axis_len: usize,
    stride: usize,
    outer: usize,
    inner: usize,
    pos: usize,
}

impl LaneIter {
    fn new(shape: &[usize], axis: usize) -> Self {
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        Self { axis_len, stride: inner, outer, inner, pos: 0 }
    }
}

impl Iterator for LaneIter {
    type Item = LaneIndices;

    fn next(&mut self) -> Option<LaneIndices> {
        if self.pos >= self.outer * self.inner {
            return None;
        }
        let o = self.pos / self.inner;
        let r = self.pos % self.inner;
        self.pos += 1;
        Some(LaneIndices {
            base: o * self.axis_len * self.inner + r,
            stride: self.stride,
            len: self.axis_len,
            next: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor2(2, 3, &[1.5, -2.0, 0.25, 3.0, 4.5, -1.0]));
        let eye = tape.leaf(tensor2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert!(tape.value(c).bit_eq(tape.value(a)));
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let a_data: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let b_data: Vec<f64> = (0..20).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let (m, k, n) = (3, 4, 5);
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a_data[i * k + l] * b_data[l * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let mut tape = Tape::new();
        let a = tape.leaf(tensor2(m, k, &a_data));
        let b = tape.leaf(tensor2(k, n, &b_data));
        let c = tape.matmul(a, b).unwrap();
        assert!(tape.value(c).bit_eq(&tensor2(m, n, &expect)));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(1, 2, &[0.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(1, 2, &[1000.0, 1000.0]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(1, 3, &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 1).unwrap();
        let z: f64 = [1.0, 2.0, 3.0].iter().map(|v: &f64| v.exp()).sum();
        for (got, v) in tape.value(y).data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - v.exp() / z).abs() < 1e-12);
        }
        let total: f64 = tape.value(y).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_invalid_positions() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(1, 4, &[5.0, 1.0, 2.0, 9.0]));
        let y = tape
            .softmax_masked(x, 1, &[true, true, true, false])
            .unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[3], 0.0);
        let z: f64 = [5.0f64, 1.0, 2.0].iter().map(|v| (v - 5.0).exp()).sum();
        assert!((out[0] - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_lane_is_an_input_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let err = tape.softmax_masked(x, 1, &[true, true, false, false]);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn layer_norm_of_constant_lane_is_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(1, 4, &[7.0, 7.0, 7.0, 7.0]));
        let gain = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let bias = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_each_lane() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor2(2, 4, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let gain = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let bias = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for lane in tape.value(y).data().chunks(4) {
            let mean: f64 = lane.iter().sum::<f64>() / 4.0;
            let var: f64 = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gelu_known_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0, 6.0, -6.0]));
        let y = tape.gelu(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated at 50-digit
        // precision and rounded to the nearest f64.
        assert!((out[1] - 0.8411919906082768).abs() < 1e-15);
        // Far from the origin the activation approaches the identity.
        assert!((out[2] - 6.0).abs() < 1e-8);
        assert!(out[3].abs() < 1e-8);
    }

    #[test]
    fn square_gradient_doubles() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_sum_gradient_vanishes() {
        // The softmax outputs always sum to one, so the gradient of that sum
        // is zero up to rounding.
        let mut tape = Tape::new();
        let x = tape.param(tensor2(1, 3, &[0.3, -1.2, 2.0]));
        let y = tape.softmax(x, 1).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        for g in grads.get(x).unwrap() {
            assert!(g.abs() <= 1e-14, "residual gradient {g}");
        }
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::scalar(5.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.wrt(unused, &tape).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.param(tensor2(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape.param(tensor2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let s = tape.sum(picked).unwrap();
        let grads = tape.backward(s).unwrap();
        // Row 1 was picked twice, row 0 once, row 2 never.
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.param(tensor2(3, 4, &data));
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let rest = tape.slice_rows(x, 1, 3).unwrap();
        let back = tape.concat_rows(top, rest).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));

        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 4).unwrap();
        let wide = tape.concat_cols(left, right).unwrap();
        assert!(tape.value(wide).bit_eq(tape.value(x)));

        let s = tape.sum(wide).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn ln_clamps_at_floor_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 1.0]));
        let y = tape.ln(x).unwrap();
        assert_eq!(tape.value(y).data()[0], LN_INPUT_FLOOR.ln());
        assert_eq!(tape.value(y).data()[1], 0.0);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn flop_counter_matches_hand_counts() {
        flops::reset();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![3, 4]));
        let b = tape.leaf(Tensor::zeros(vec![4, 5]));
        let c = tape.matmul(a, b).unwrap(); // 2*3*4*5 = 120
        let row = tape.leaf(Tensor::zeros(vec![5]));
        let d = tape.add_row(c, row).unwrap(); // 15
        let e = tape.gelu(d).unwrap(); // 8*15 = 120
        let f = tape.softmax(e, 1).unwrap(); // 5*15 = 75
        let _ = tape.sum(f).unwrap(); // 15
        assert_eq!(flops::read(), 120 + 15 + 120 + 75 + 15);
    }

    #[test]
    fn movement_ops_cost_nothing() {
        flops::reset();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 4]));
        let t = tape.transpose(x).unwrap();
        let g = tape.gather_rows(t, &[0, 2]).unwrap();
        let s = tape.slice_cols(g, 0, 2).unwrap();
        let _ = tape.reshape(s, vec![4]).unwrap();
        assert_eq!(flops::read(), 0);
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let mut tape = Tape::new();
        let x = tape.param(tensor2(2, 3, &[0.1, -0.2, 0.3, 1.5, -2.5, 0.7]));
        let w = tape.param(tensor2(3, 3, &(0..9).map(|i| (i as f64).sin()).collect::<Vec<_>>()));
        let gain = tape.leaf(Tensor::vector(vec![1.0, 0.9, 1.1]));
        let bias = tape.leaf(Tensor::vector(vec![0.0, 0.1, -0.1]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.layer_norm(h, gain, bias, 1e-12).unwrap();
        let h = tape.softmax(h, 1).unwrap();
        let _ = tape.sum(h).unwrap();
        tape.replay_check().unwrap();
    }

    #[test]
    fn f32_tape_rounds_every_result() {
        let mut tape = Tape::with_precision(Precision::F32);
        let a = tape.leaf(Tensor::vector(vec![0.1]));
        let b = tape.leaf(Tensor::vector(vec![0.2]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data()[0], (0.1f64 + 0.2) as f32 as f64);
    }
}
