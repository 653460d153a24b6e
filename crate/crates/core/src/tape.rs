//! Record-and-replay reverse-mode differentiation over [`Matrix`] values.
//!
//! A forward pass pushes nodes onto a [`Tape`] in topological order; each
//! node owns its output value. [`Tape::backward`] walks the list in reverse
//! and accumulates exact analytic adjoints. One forward/backward pass owns
//! one tape; batch code builds one tape per sample and reduces gradients in
//! a fixed order so results do not depend on scheduling.
//!
//! Index selection (query selection) is intentionally not an op: selection
//! consumes node *values* and the chosen indices enter later ops as plain
//! metadata, so no gradient ever flows through scores or indices.

use crate::error::{Error, Result};
use crate::matrix::{softmax_row_in_place, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a * b^T
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    SoftmaxRows {
        input: NodeId,
        scale: f64,
        causal: bool,
    },
    ColumnMean(NodeId),
    RepeatRows {
        input: NodeId,
        count: usize,
    },
    GatherRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    /// base with rows at `indices` overwritten by the rows of `rows`.
    ScatterRows {
        base: NodeId,
        rows: NodeId,
        indices: Vec<usize>,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        offset: NodeId,
    },
    Gelu(NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    SumAll(NodeId),
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    Detach(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    trainable: bool,
}

/// Computation record for one forward/backward pass. Single-writer.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient as a matrix of the given shape, zeros when unreached.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_seed(0)
    }

    /// The seed drives the dropout stream only.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
        });
        self.nodes.len() - 1
    }

    /// Non-trainable leaf (inputs, constants).
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf; `backward` reports gradients for these.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.nodes[id].trainable = true;
        id
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id].trainable
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    /// Row-wise softmax of `input / scale`; with `causal` set, entries at
    /// column j > row i are excluded from the distribution.
    pub fn softmax_rows(&mut self, input: NodeId, scale: f64, causal: bool) -> Result<NodeId> {
        let m = self.value(input);
        if causal && m.rows() > m.cols() {
            return Err(Error::Dim(format!(
                "causal softmax needs cols >= rows, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let mut value = m.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            if causal {
                for v in row.iter_mut().skip(r + 1) {
                    *v = f64::NEG_INFINITY;
                }
            }
            softmax_row_in_place(row, scale);
        }
        Ok(self.push(
            Op::SoftmaxRows {
                input,
                scale,
                causal,
            },
            value,
        ))
    }

    pub fn column_mean(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).column_mean();
        self.push(Op::ColumnMean(input), value)
    }

    /// Stack `count` copies of a 1 x n row.
    pub fn repeat_rows(&mut self, input: NodeId, count: usize) -> Result<NodeId> {
        let m = self.value(input);
        if m.rows() != 1 {
            return Err(Error::Dim(format!(
                "repeat_rows expects 1xN, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let mut value = Matrix::zeros(count, m.cols());
        for r in 0..count {
            value.row_mut(r).copy_from_slice(m.row(0));
        }
        Ok(self.push(Op::RepeatRows { input, count }, value))
    }

    pub fn gather_rows(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let m = self.value(input);
        if indices.is_empty() {
            return Err(Error::Arg("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::Arg(format!(
                "gather_rows: index {} out of range for {} rows",
                bad,
                m.rows()
            )));
        }
        let mut value = Matrix::zeros(indices.len(), m.cols());
        for (r, &src) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(m.row(src));
        }
        Ok(self.push(
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// `base` with row `indices[i]` overwritten by row i of `rows`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: NodeId, rows: NodeId, indices: &[usize]) -> Result<NodeId> {
        let b = self.value(base);
        let r = self.value(rows);
        if b.cols() != r.cols() || r.rows() != indices.len() {
            return Err(Error::Dim(format!(
                "scatter_rows: base {}x{}, rows {}x{}, {} indices",
                b.rows(),
                b.cols(),
                r.rows(),
                r.cols(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= b.rows()) {
            return Err(Error::Arg(format!(
                "scatter_rows: index {} out of range for {} rows",
                bad,
                b.rows()
            )));
        }
        debug_assert!(
            {
                let mut s = indices.to_vec();
                s.sort_unstable();
                s.windows(2).all(|w| w[0] != w[1])
            },
            "scatter_rows indices must be distinct"
        );
        let mut value = b.clone();
        for (i, &dst) in indices.iter().enumerate() {
            let src = r.row(i).to_vec();
            value.row_mut(dst).copy_from_slice(&src);
        }
        Ok(self.push(
            Op::ScatterRows {
                base,
                rows,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// Per-row normalization with learned 1 x n gain and offset.
    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, offset: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let g = self.value(gain);
        let b = self.value(offset);
        if g.rows() != 1 || b.rows() != 1 || g.cols() != x.cols() || b.cols() != x.cols() {
            return Err(Error::Dim(format!(
                "layer_norm: input {}x{}, gain {}x{}, offset {}x{}",
                x.rows(),
                x.cols(),
                g.rows(),
                g.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let (mean, inv_std) = row_norm_stats(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g.get(0, j) + b.get(0, j);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                input,
                gain,
                offset,
            },
            value,
        ))
    }

    /// Smooth Gaussian-error-linear activation (tanh form).
    pub fn gelu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(gelu);
        self.push(Op::Gelu(input), value)
    }

    /// Inverted dropout driven by the tape's seeded stream. `rate` in [0, 1).
    pub fn dropout(&mut self, input: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Arg(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            // keep the node count stable without burning RNG draws
            let value = self.value(input).clone();
            return Ok(self.push(Op::Detach(input), value));
        }
        let keep = 1.0 - rate;
        let n = {
            let m = self.value(input);
            m.rows() * m.cols()
        };
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.value(input);
        let mut value = m.clone();
        for (v, &k) in value.as_mut_slice().iter_mut().zip(&mask) {
            *v *= k;
        }
        Ok(self.push(Op::Dropout { input, mask }, value))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(input).sum()]).unwrap();
        self.push(Op::SumAll(input), value)
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = self.value(input);
        if len == 0 || start + len > m.rows() {
            return Err(Error::Arg(format!(
                "slice_rows: [{start}, {}) out of range for {} rows",
                start + len,
                m.rows()
            )));
        }
        let mut value = Matrix::zeros(len, m.cols());
        for r in 0..len {
            value.row_mut(r).copy_from_slice(m.row(start + r));
        }
        Ok(self.push(Op::SliceRows { input, start, len }, value))
    }

    /// Mean squared error of `pred` against a constant target, as 1x1.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.sub(pred, target)?;
        let sq = self.hadamard(d, d)?;
        let s = self.sum_all(sq);
        let n = {
            let m = self.value(pred);
            (m.rows() * m.cols()) as f64
        };
        Ok(self.scale(s, 1.0 / n))
    }

    /// Mean cross-entropy of row-wise class logits against target indices,
    /// computed via log-sum-exp. Returns 1x1.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let m = self.value(logits);
        if targets.len() != m.rows() {
            return Err(Error::Dim(format!(
                "softmax_cross_entropy: {} logit rows vs {} targets",
                m.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m.cols()) {
            return Err(Error::Arg(format!(
                "softmax_cross_entropy: target class {} out of range {}",
                bad,
                m.cols()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Matrix::from_vec(1, 1, vec![total / targets.len() as f64]).unwrap();
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
        ))
    }

    /// Horizontal concatenation of equal-height blocks.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Arg("concat_cols: no inputs".into()));
        }
        let rows = self.value(inputs[0]).rows();
        let mut cols = 0;
        for &id in inputs {
            let m = self.value(id);
            if m.rows() != rows {
                return Err(Error::Dim(format!(
                    "concat_cols: row counts differ, {} vs {}",
                    rows,
                    m.rows()
                )));
            }
            cols += m.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &id in inputs {
            let m = self.value(id);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(Op::ConcatCols(inputs.to_vec()), value))
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).clone();
        self.push(Op::Detach(input), value)
    }

    /// Reverse-topological adjoint accumulation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &out_grad, &mut grads);
            grads[id] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: NodeId, d_out: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = d_out.matmul_nt(self.value(*b)).unwrap();
                let db = self.value(*a).transpose().matmul(d_out).unwrap();
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                let da = d_out.matmul(self.value(*b)).unwrap();
                let db = d_out.transpose().matmul(self.value(*a)).unwrap();
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, d_out.clone());
                add_grad(grads, *b, d_out.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, d_out.clone());
                add_grad(grads, *b, d_out.scale(-1.0));
            }
            Op::Scale(a, c) => {
                add_grad(grads, *a, d_out.scale(*c));
            }
            Op::Hadamard(a, b) => {
                add_grad(grads, *a, d_out.hadamard(self.value(*b)).unwrap());
                add_grad(grads, *b, d_out.hadamard(self.value(*a)).unwrap());
            }
            Op::SoftmaxRows { input, scale, .. } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                let inv = 1.0 / scale;
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = d_out.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    let dr = dx.row_mut(r);
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot) * inv;
                    }
                }
                add_grad(grads, *input, dx);
            }
            Op::ColumnMean(a) => {
                let m = self.value(*a);
                let inv = 1.0 / m.rows() as f64;
                let mut dx = Matrix::zeros(m.rows(), m.cols());
                for r in 0..m.rows() {
                    for c in 0..m.cols() {
                        dx.set(r, c, d_out.get(0, c) * inv);
                    }
                }
                add_grad(grads, *a, dx);
            }
            Op::RepeatRows { input, count } => {
                let cols = node.value.cols();
                let mut dx = Matrix::zeros(1, cols);
                for r in 0..*count {
                    for c in 0..cols {
                        dx.set(0, c, dx.get(0, c) + d_out.get(r, c));
                    }
                }
                add_grad(grads, *input, dx);
            }
            Op::GatherRows { input, indices } => {
                let m = self.value(*input);
                let mut dx = Matrix::zeros(m.rows(), m.cols());
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..m.cols() {
                        dx.set(src, c, dx.get(src, c) + d_out.get(r, c));
                    }
                }
                add_grad(grads, *input, dx);
            }
            Op::ScatterRows { base, rows, indices } => {
                let mut d_base = d_out.clone();
                for &i in indices {
                    d_base.row_mut(i).fill(0.0);
                }
                let mut d_rows = Matrix::zeros(indices.len(), d_out.cols());
                for (r, &src) in indices.iter().enumerate() {
                    d_rows.row_mut(r).copy_from_slice(d_out.row(src));
                }
                add_grad(grads, *base, d_base);
                add_grad(grads, *rows, d_rows);
            }
            Op::LayerNorm {
                input,
                gain,
                offset,
            } => {
                let x = self.value(*input);
                let g = self.value(*gain);
                let n = x.cols();
                let mut dx = Matrix::zeros(x.rows(), n);
                let mut dg = Matrix::zeros(1, n);
                let mut db = Matrix::zeros(1, n);
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let (mean, inv_std) = row_norm_stats(xr);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv_std).collect();
                    let gr = d_out.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * g.get(0, j);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        dg.set(0, j, dg.get(0, j) + gr[j] * xhat[j]);
                        db.set(0, j, db.get(0, j) + gr[j]);
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    let dr = dx.row_mut(r);
                    for j in 0..n {
                        let dxh = gr[j] * g.get(0, j);
                        dr[j] = inv_std * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                add_grad(grads, *input, dx);
                add_grad(grads, *gain, dg);
                add_grad(grads, *offset, db);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.as_slice()
                        .iter()
                        .zip(d_out.as_slice())
                        .map(|(&x, &g)| g * gelu_grad(x))
                        .collect(),
                )
                .unwrap();
                add_grad(grads, *a, dx);
            }
            Op::Dropout { input, mask } => {
                let mut dx = d_out.clone();
                for (v, &k) in dx.as_mut_slice().iter_mut().zip(mask) {
                    *v *= k;
                }
                add_grad(grads, *input, dx);
            }
            Op::SumAll(a) => {
                let m = self.value(*a);
                let dx = Matrix::filled(m.rows(), m.cols(), d_out.get(0, 0));
                add_grad(grads, *a, dx);
            }
            Op::SliceRows { input, start, len } => {
                let m = self.value(*input);
                let mut dx = Matrix::zeros(m.rows(), m.cols());
                for r in 0..*len {
                    dx.row_mut(start + r).copy_from_slice(d_out.row(r));
                }
                add_grad(grads, *input, dx);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let m = self.value(*logits);
                let scale = d_out.get(0, 0) / targets.len() as f64;
                let mut dx = Matrix::zeros(m.rows(), m.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = m.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let dr = dx.row_mut(r);
                    for j in 0..row.len() {
                        let p = (row[j] - max).exp() / sum;
                        dr[j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                add_grad(grads, *logits, dx);
            }
            Op::ConcatCols(inputs) => {
                let mut offset = 0;
                for &src in inputs {
                    let m = self.value(src);
                    let mut dx = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        dx.row_mut(r)
                            .copy_from_slice(&d_out.row(r)[offset..offset + m.cols()]);
                    }
                    offset += m.cols();
                    add_grad(grads, src, dx);
                }
            }
            Op::Detach(_) => {}
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn add_grad(grads: &mut [Option<Matrix>], id: NodeId, contribution: Matrix) {
    match &mut grads[id] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), contribution.shape());
            for (a, b) in acc.as_mut_slice().iter_mut().zip(contribution.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let m = tape.param(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn backward_of_matmul_sum_matches_known_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a_val = random_matrix(&mut rng, 3, 4);
        let b_val = random_matrix(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let a = tape.param(a_val.clone());
        let b = tape.param(b_val.clone());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();

        let ones = Matrix::filled(3, 2, 1.0);
        let want_da = ones.matmul_nt(&b_val).unwrap();
        let want_db = a_val.transpose().matmul(&ones).unwrap();
        for (g, w) in grads.get(a).unwrap().as_slice().iter().zip(want_da.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
        for (g, w) in grads.get(b).unwrap().as_slice().iter().zip(want_db.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let m = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(m), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let m = tape.param(Matrix::filled(2, 2, 3.0));
        let d = tape.detach(m);
        let loss = tape.sum_all(d);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(m).is_none());
    }

    // Central finite differences over every entry of every parameter. The
    // builder sees its params pre-registered as nodes 0..N, in order.
    fn finite_difference_check(build: impl Fn(&mut Tape) -> NodeId, params: &[Matrix], tol: f64) {
        fn eval(build: &impl Fn(&mut Tape) -> NodeId, params: &[Matrix]) -> f64 {
            let mut tape = Tape::new();
            for p in params {
                tape.param(p.clone());
            }
            let loss = build(&mut tape);
            tape.value(loss).get(0, 0)
        }

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[pi], p.rows(), p.cols());
            for e in 0..p.rows() * p.cols() {
                let mut plus = params.to_vec();
                plus[pi].as_mut_slice()[e] += h;
                let mut minus = params.to_vec();
                minus[pi].as_mut_slice()[e] -= h;
                let numeric = (eval(&build, &plus) - eval(&build, &minus)) / (2.0 * h);
                let a = analytic.as_slice()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "param {pi} entry {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p0 = random_matrix(&mut rng, 3, 4);
        let p1 = random_matrix(&mut rng, 4, 3);
        let p2 = random_matrix(&mut rng, 1, 3);
        let p3 = random_matrix(&mut rng, 1, 3);

        // softmax(matmul) -> layer_norm -> gelu -> sum
        finite_difference_check(
            |tape| {
                let c = tape.matmul(0, 1).unwrap();
                let s = tape.softmax_rows(c, 1.7, false).unwrap();
                let n = tape.layer_norm(s, 2, 3).unwrap();
                let g = tape.gelu(n);
                tape.sum_all(g)
            },
            &[p0.clone(), p1.clone(), p2.clone(), p3.clone()],
            1e-5,
        );

        // gather/scatter/column_mean/repeat path (the sparse fill shape)
        finite_difference_check(
            |tape| {
                let prod = tape.matmul_nt(0, 1).unwrap();
                let gathered = tape.gather_rows(prod, &[2, 0]).unwrap();
                let cm = tape.column_mean(1);
                let base = tape.repeat_rows(cm, 4).unwrap();
                let scat = tape.scatter_rows(base, gathered, &[2, 0]).unwrap();
                let sq = tape.hadamard(scat, scat).unwrap();
                tape.sum_all(sq)
            },
            &[random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 4, 3)],
            1e-5,
        );

        // cross-entropy head
        finite_difference_check(
            |tape| {
                let logits = tape.matmul(0, 1).unwrap();
                tape.softmax_cross_entropy(logits, &[2, 0, 1]).unwrap()
            },
            &[random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 4, 5)],
            1e-5,
        );
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let mut tape = Tape::new();
        let m = tape.input(Matrix::filled(3, 3, 1.0));
        let s = tape.softmax_rows(m, 1.0, true).unwrap();
        let v = tape.value(s);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        for r in 0..3 {
            let sum: f64 = v.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((v.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_seeded_stream_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_matrix(&mut rng, 4, 4);

        let mut tape = Tape::with_seed(5);
        let a = tape.input(x.clone());
        let d = tape.dropout(a, 0.0).unwrap();
        assert_eq!(tape.value(d), &x);

        let run = |seed: u64| {
            let mut tape = Tape::with_seed(seed);
            let a = tape.input(x.clone());
            let d = tape.dropout(a, 0.5).unwrap();
            tape.value(d).clone()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(2, 3, 1.5));
        let b = tape.input(Matrix::filled(2, 3, 1.5));
        let loss = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(loss).get(0, 0), 0.0);
    }
}
