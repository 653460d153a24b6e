//! Scaled dot-product attention, the deterministic query-selector sparse
//! variant, and the multi-head wrapper.
//!
//! The query-selector kernel keeps only the l = floor((1-f) * L) queries
//! that score highest against a per-column top-l key summary. Output rows
//! for kept queries equal the corresponding full-attention rows exactly
//! (softmax is row-wise); dropped rows are filled with the column mean of
//! the value matrix. The key summary, the scores and the chosen indices are
//! never differentiated: gradients flow only through the gathered queries,
//! the keys and the values.
//!
//! All kernels here are pure functions of their inputs: identical inputs
//! give bitwise-identical outputs regardless of thread count.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};

/// Kernel choice for one attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    QuerySelector,
}

/// Learned projections for one multi-head attention site.
///
/// Each head owns `model_dim x head_dim` projections; `w_o` maps the
/// concatenated head outputs (`heads * head_dim`) back to `model_dim`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
    pub mode: AttentionMode,
    pub factor_f: f64,
}

/// What one query selection decided: the kept count, the kept query rows
/// and the key summary plus raw scores behind the decision.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub l: usize,
    pub selected_indices: Vec<usize>,
    pub k_hat: Matrix,
    pub scores: Matrix,
}

impl SelectionReport {
    /// Score gap between the weakest kept query and the strongest dropped
    /// one; `None` when nothing was dropped. Positive gaps mean the
    /// selection is locally constant under small input perturbations.
    pub fn selection_gap(&self) -> Option<f64> {
        let n = self.scores.cols();
        if self.l >= n {
            return None;
        }
        let mut sorted: Vec<f64> = self.scores.row(0).to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        Some(sorted[self.l - 1] - sorted[self.l])
    }
}

/// Number of queries kept for factor `f` over `len` queries.
pub fn selected_count(len: usize, f: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Arg(format!("factor f={f} outside [0, 1)")));
    }
    let l = ((1.0 - f) * len as f64).floor() as usize;
    if l == 0 {
        return Err(Error::Arg(format!(
            "factor f={f} too large for sequence length {len}"
        )));
    }
    Ok(l)
}

/// softmax(q k^T / scale) v, with optional causal masking of keys past the
/// query position.
pub fn full_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    causal_mask: bool,
) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::Dim(format!(
            "full_attention: {} key rows vs {} value rows",
            k.rows(),
            v.rows()
        )));
    }
    if causal_mask && q.rows() > k.rows() {
        return Err(Error::Dim(format!(
            "full_attention: causal mask needs at least as many keys as queries, got {} queries, {} keys",
            q.rows(),
            k.rows()
        )));
    }
    let mut scores = q.matmul_nt(k)?;
    if causal_mask {
        for r in 0..scores.rows() {
            for val in scores.row_mut(r).iter_mut().skip(r + 1) {
                *val = f64::NEG_INFINITY;
            }
        }
    }
    scores.softmax_rows(scale).matmul(v)
}

/// Score every query against the top-l key summary and keep the l best.
///
/// `q` may have a different row count than `k` (cross-attention); l is
/// taken from the query count, and the key summary uses min(l, key rows)
/// entries per column.
pub fn select_queries(q: &Matrix, k: &Matrix, f: f64) -> Result<SelectionReport> {
    if q.cols() != k.cols() {
        return Err(Error::Dim(format!(
            "select_queries: query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    let l = selected_count(q.rows(), f)?;
    let k_hat = k.top_l_column_mean(l.min(k.rows()))?;
    let scores = k_hat.matmul_nt(q)?;
    let selected_indices = scores.top_l_indices(l)?;
    Ok(SelectionReport {
        l,
        selected_indices,
        k_hat,
        scores,
    })
}

/// The sparse attention kernel: full-attention rows for the selected
/// queries, the column mean of `v` everywhere else.
pub fn query_selector_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    f: f64,
    scale: f64,
) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::Dim(format!(
            "query_selector_attention: {} key rows vs {} value rows",
            k.rows(),
            v.rows()
        )));
    }
    let report = select_queries(q, k, f)?;
    let mut q_hat = Matrix::zeros(report.l, q.cols());
    for (r, &src) in report.selected_indices.iter().enumerate() {
        q_hat.row_mut(r).copy_from_slice(q.row(src));
    }
    let attn = q_hat.matmul_nt(k)?.softmax_rows(scale).matmul(v)?;
    let v_bar = v.column_mean();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(v_bar.row(0));
    }
    for (r, &dst) in report.selected_indices.iter().enumerate() {
        let row = attn.row(r).to_vec();
        out.row_mut(dst).copy_from_slice(&row);
    }
    Ok(out)
}

/// Multi-head attention over plain matrices. Scale is sqrt(head_dim).
/// Query-selector mode ignores `causal_mask`.
pub fn multi_head(
    x_q: &Matrix,
    x_kv: &Matrix,
    params: &AttentionParams,
    causal_mask: bool,
) -> Result<Matrix> {
    validate_params(params, x_q.cols())?;
    let head_dim = params.w_q[0].cols();
    let scale = (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.w_q.len());
    for h in 0..params.w_q.len() {
        let q = x_q.matmul(&params.w_q[h])?;
        let k = x_kv.matmul(&params.w_k[h])?;
        let v = x_kv.matmul(&params.w_v[h])?;
        let out = match params.mode {
            AttentionMode::Full => full_attention(&q, &k, &v, scale, causal_mask)?,
            AttentionMode::QuerySelector => {
                query_selector_attention(&q, &k, &v, params.factor_f, scale)?
            }
        };
        heads.push(out);
    }
    concat_cols(&heads)?.matmul(&params.w_o)
}

fn validate_params(params: &AttentionParams, model_dim: usize) -> Result<()> {
    let heads = params.w_q.len();
    if heads == 0 || params.w_k.len() != heads || params.w_v.len() != heads {
        return Err(Error::Arg(format!(
            "attention params: {} query, {} key, {} value projections",
            heads,
            params.w_k.len(),
            params.w_v.len()
        )));
    }
    let head_dim = params.w_q[0].cols();
    for m in params.w_q.iter().chain(&params.w_k).chain(&params.w_v) {
        if m.shape() != (model_dim, head_dim) {
            return Err(Error::Dim(format!(
                "attention projection {}x{} does not match {}x{}",
                m.rows(),
                m.cols(),
                model_dim,
                head_dim
            )));
        }
    }
    if params.w_o.rows() != heads * head_dim {
        return Err(Error::Dim(format!(
            "output projection expects {} rows, got {}",
            heads * head_dim,
            params.w_o.rows()
        )));
    }
    if !(0.0..1.0).contains(&params.factor_f) {
        return Err(Error::Arg(format!(
            "factor f={} outside [0, 1)",
            params.factor_f
        )));
    }
    Ok(())
}

fn concat_cols(parts: &[Matrix]) -> Result<Matrix> {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|m| m.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for m in parts {
        if m.rows() != rows {
            return Err(Error::Dim(format!(
                "concat: row counts differ, {} vs {}",
                rows,
                m.rows()
            )));
        }
        for r in 0..rows {
            out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
        }
        offset += m.cols();
    }
    Ok(out)
}

// ---- tape builders: the same kernels recorded for differentiation ----

/// Taped full attention; values match [`full_attention`] bitwise.
pub fn full_attention_node(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    scale: f64,
    causal_mask: bool,
) -> Result<NodeId> {
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::Dim(format!(
            "full_attention: {} key rows vs {} value rows",
            tape.value(k).rows(),
            tape.value(v).rows()
        )));
    }
    let scores = tape.matmul_nt(q, k)?;
    let attn = tape.softmax_rows(scores, scale, causal_mask)?;
    tape.matmul(attn, v)
}

/// Taped query-selector attention. Selection runs on detached values; the
/// returned report carries the scores and chosen indices for inspection.
pub fn query_selector_attention_node(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    f: f64,
    scale: f64,
) -> Result<(NodeId, SelectionReport)> {
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::Dim(format!(
            "query_selector_attention: {} key rows vs {} value rows",
            tape.value(k).rows(),
            tape.value(v).rows()
        )));
    }
    let rows = tape.value(q).rows();
    let report = select_queries(tape.value(q), tape.value(k), f)?;
    let q_hat = tape.gather_rows(q, &report.selected_indices)?;
    let scores = tape.matmul_nt(q_hat, k)?;
    let attn = tape.softmax_rows(scores, scale, false)?;
    let a = tape.matmul(attn, v)?;
    let v_bar = tape.column_mean(v);
    let base = tape.repeat_rows(v_bar, rows)?;
    let out = tape.scatter_rows(base, a, &report.selected_indices)?;
    Ok((out, report))
}

/// Projection nodes for one taped multi-head site.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub w_q: Vec<NodeId>,
    pub w_k: Vec<NodeId>,
    pub w_v: Vec<NodeId>,
    pub w_o: NodeId,
}

/// Taped multi-head attention; returns the output node and one selection
/// report per head in query-selector mode.
pub fn multi_head_node(
    tape: &mut Tape,
    x_q: NodeId,
    x_kv: NodeId,
    nodes: &AttentionNodes,
    mode: AttentionMode,
    factor_f: f64,
    causal_mask: bool,
) -> Result<(NodeId, Vec<SelectionReport>)> {
    let head_dim = tape.value(nodes.w_q[0]).cols();
    let scale = (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(nodes.w_q.len());
    let mut reports = Vec::new();
    for h in 0..nodes.w_q.len() {
        let q = tape.matmul(x_q, nodes.w_q[h])?;
        let k = tape.matmul(x_kv, nodes.w_k[h])?;
        let v = tape.matmul(x_kv, nodes.w_v[h])?;
        let out = match mode {
            AttentionMode::Full => full_attention_node(tape, q, k, v, scale, causal_mask)?,
            AttentionMode::QuerySelector => {
                let (out, report) = query_selector_attention_node(tape, q, k, v, factor_f, scale)?;
                reports.push(report);
                out
            }
        };
        heads.push(out);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, nodes.w_o)?;
    Ok((out, reports))
}
