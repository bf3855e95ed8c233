//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the [`Tape`]; node ids
//! are issued in creation order, so the tape is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::sparse::CsrMatrix;
use super::tensor::gemm;
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1×c` repeated over rows.
    Row,
    /// `r×1` repeated over columns.
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Binary { kind: BinKind, a: Var, b: Var, bcast: Bcast },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    RowSoftmax { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Log { x: Var },
    Softplus { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumRows { x: Var },
    RowL2Normalize { x: Var, inv_norms: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    GatherRows { x: Var, idx: Arc<[usize]> },
    SegmentSoftmax { x: Var, offsets: Arc<[usize]> },
    EdgeAggregate { coef: Var, values: Var, src: Arc<[usize]>, dst: Arc<[usize]> },
    SpMM { m: Arc<CsrMatrix>, x: Var },
    SoftmaxCrossEntropy { logits: Var, rows: Arc<[usize]>, targets: Arc<[usize]>, probs: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch-norm, for updating
/// running estimates outside the tape.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (N−1) variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        if self.check_finite && !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name, node: self.nodes.len() });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, param: None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, param: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf whose gradient is tracked (queried via [`Gradients::wrt`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, param: None, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Frozen or non-trainable parameters
    /// behave like constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, param: Some(id), requires_grad: p.trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var, NumericsError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{ar}x{ac}{} times {br}x{bc}{}", if a_t { "ᵀ" } else { "" }, if b_t { "ᵀ" } else { "" }),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), a_t, self.value(b).data(), b_t, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul { a, b, a_t, b_t }, &[a, b])
    }

    pub fn spmm(&mut self, m: Arc<CsrMatrix>, x: Var) -> Result<Var, NumericsError> {
        let value = m.matmul(self.value(x))?;
        self.push("spmm", value, Op::SpMM { m, x }, &[x])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let bcast = if (ar, ac) == (br, bc) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else if bc == 1 && br == ar {
            Bcast::Col
        } else {
            return Err(NumericsError::ShapeMismatch {
                op: "elementwise",
                detail: format!("{ar}x{ac} with {br}x{bc}"),
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = match kind {
            BinKind::Add => broadcast(av, bv, ac, bcast, |x, y| x + y),
            BinKind::Sub => broadcast(av, bv, ac, bcast, |x, y| x - y),
            BinKind::Mul => broadcast(av, bv, ac, bcast, |x, y| x * y),
            BinKind::Div => broadcast(av, bv, ac, bcast, |x, y| x / y),
        };
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        self.push(name, value, Op::Binary { kind, a, b, bcast }, &[a, b])
    }

    /// `a + b`; `b` may be the same shape, a `1×c` row, an `r×1` column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar { x }, &[x])
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(NumericsError::ShapeMismatch { op: "concat", detail: "row counts differ".into() });
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        self.push("concat", value, Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(x);
        if start > end || end > r {
            return Err(NumericsError::ShapeMismatch { op: "slice_rows", detail: format!("rows {start}..{end} of {r}") });
        }
        let value = Tensor::matrix(end - start, c, self.value(x).data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(stable_sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(f64::ln);
        self.push("log", value, Op::Log { x }, &[x])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push("softplus", value, Op::Softplus { x }, &[x])
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("row_softmax", value, Op::RowSoftmax { x }, &[x])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let m = s / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push("sum_rows", Tensor::row(out), Op::SumRows { x }, &[x])
    }

    // ---- normalization / regularization --------------------------------

    /// Scale each row to unit L2 norm. Rows with norm below `1e-12` map to
    /// zero and pass no gradient.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut inv_norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if norm < ROW_NORM_GUARD { 0.0 } else { 1.0 / norm };
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norms.push(inv);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("row_l2_normalize", value, Op::RowL2Normalize { x, inv_norms }, &[x])
    }

    /// Inverted dropout. A rate of 0 returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NumericsError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(NumericsError::InvalidArgument(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Train-mode batch-norm over rows, using the batch's biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats), NumericsError> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut mean = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut ss = vec![0.0; c];
        for row in t.data().chunks(c) {
            for ((s, v), m) in ss.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = ss.iter().map(|s| s / n as f64).collect();
        let unbiased: Vec<f64> = ss.iter().map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 }).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((var, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch-norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let c = t.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c || mean.len() != c || inv_std.len() != c {
            return Err(NumericsError::ShapeMismatch { op: "batch_norm", detail: format!("{c} columns") });
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        let c1 = c.max(1);
        for ((row, hr), or) in t.data().chunks(c1).zip(xhat.chunks_mut(c1)).zip(out.chunks_mut(c1)) {
            for j in 0..row.len() {
                let h = (row[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("batch_norm", value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta])
    }

    // ---- graph ops ------------------------------------------------------

    /// `out[e] = x[idx[e]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if idx.iter().any(|&i| i >= t.rows()) {
            return Err(NumericsError::ShapeMismatch { op: "gather_rows", detail: "index out of range".into() });
        }
        let value = t.select_rows(&idx);
        self.push("gather_rows", value, Op::GatherRows { x, idx }, &[x])
    }

    /// Softmax of an `E×1` column within contiguous groups
    /// `offsets[g]..offsets[g+1]`. Empty groups are allowed.
    pub fn segment_softmax(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.cols() != 1 || offsets.last().copied() != Some(t.rows()) {
            return Err(NumericsError::ShapeMismatch { op: "segment_softmax", detail: format!("{:?}", t.shape()) });
        }
        let mut out = t.data().to_vec();
        for w in offsets.windows(2) {
            softmax_in_place(&mut out[w[0]..w[1]]);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("segment_softmax", value, Op::SegmentSoftmax { x, offsets }, &[x])
    }

    /// `out[src[e]] += coef[e] · values[dst[e]]`; output has as many rows as `values`.
    pub fn edge_aggregate(&mut self, coef: Var, values: Var, src: Arc<[usize]>, dst: Arc<[usize]>) -> Result<Var, NumericsError> {
        let c = self.value(coef);
        let v = self.value(values);
        let (n, d) = (v.rows(), v.cols());
        if c.cols() != 1 || c.rows() != src.len() || src.len() != dst.len() {
            return Err(NumericsError::ShapeMismatch { op: "edge_aggregate", detail: format!("coef {:?}", c.shape()) });
        }
        if src.iter().chain(dst.iter()).any(|&i| i >= n) {
            return Err(NumericsError::ShapeMismatch { op: "edge_aggregate", detail: "vertex index out of range".into() });
        }
        let mut out = vec![0.0; n * d];
        let vd = v.data();
        for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
            let w = c.data()[e];
            let row = &vd[t * d..(t + 1) * d];
            for (o, x) in out[s * d..(s + 1) * d].iter_mut().zip(row) {
                *o += w * x;
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        self.push("edge_aggregate", value, Op::EdgeAggregate { coef, values, src, dst }, &[coef, values])
    }

    // ---- losses ---------------------------------------------------------

    /// Mean softmax cross-entropy over the selected rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, rows: Arc<[usize]>, targets: Arc<[usize]>) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let c = t.cols();
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "cross_entropy", detail: format!("{} rows, {} targets", rows.len(), targets.len()) });
        }
        if rows.iter().any(|&r| r >= t.rows()) || targets.iter().any(|&k| k >= c) {
            return Err(NumericsError::ShapeMismatch { op: "cross_entropy", detail: "row or class out of range".into() });
        }
        let mut probs = Vec::with_capacity(rows.len() * c);
        let mut loss = 0.0;
        for (&r, &k) in rows.iter().zip(targets.iter()) {
            let row = t.row_slice(r);
            let lse = log_sum_exp(row);
            loss -= row[k] - lse;
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= rows.len() as f64;
        self.push("cross_entropy", Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, rows, targets, probs }, &[logits])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::BackwardBeforeForward);
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj);
            }
            adj[id] = Some(g);
        }
        Ok(Gradients { adjoints: adj, params: self.nodes.iter().map(|n| n.param).collect() })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (a, b, a_t, b_t) = (*a, *b, *a_t, *b_t);
                let av = self.value(a);
                let bv = self.value(b);
                let (m, n) = (g.rows(), g.cols());
                let k = if a_t { av.rows() } else { av.cols() };
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    if a_t {
                        // dA (k×m) = op(B) · dCᵀ
                        gemm(k, n, m, bv.data(), b_t, gd, true, &mut da, 0.0);
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        gemm(m, n, k, gd, false, bv.data(), !b_t, &mut da, 0.0);
                    }
                    accumulate(adj, a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    if b_t {
                        // dB (n×k) = dCᵀ · op(A)
                        gemm(n, m, k, gd, true, av.data(), a_t, &mut db, 0.0);
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        gemm(k, m, n, av.data(), !a_t, gd, false, &mut db, 0.0);
                    }
                    accumulate(adj, b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (a, b, bcast) = (*a, *b, *bcast);
                let av = self.value(a);
                let bv = self.value(b);
                let c = av.cols();
                if self.needs(a) {
                    let da: Vec<f64> = match kind {
                        BinKind::Add | BinKind::Sub => gd.to_vec(),
                        BinKind::Mul => broadcast(gd, bv.data(), c, bcast, |g, y| g * y),
                        BinKind::Div => broadcast(gd, bv.data(), c, bcast, |g, y| g / y),
                    };
                    accumulate(adj, a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.needs(b) {
                    let local: Vec<f64> = match kind {
                        BinKind::Add => gd.to_vec(),
                        BinKind::Sub => gd.iter().map(|g| -g).collect(),
                        BinKind::Mul => gd.iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                        BinKind::Div => {
                            let q = broadcast(node.value.data(), bv.data(), c, bcast, |o, y| o / y);
                            gd.iter().zip(&q).map(|(g, q)| -g * q).collect()
                        }
                    };
                    let db = reduce_broadcast(local, bv.len(), c, bcast);
                    accumulate(adj, b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Scale { x, c } => {
                accumulate(adj, *x, g.map(|v| v * c));
            }
            Op::AddScalar { x } => {
                accumulate(adj, *x, g.clone());
            }
            Op::ConcatCols { parts } => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + pc]);
                        }
                        accumulate(adj, p, Tensor::new(self.value(p).shape().to_vec(), dp).expect("shape"));
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(adj, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::RowSoftmax { x } => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(v, gv)| if *v > 0.0 { *gv } else { slope * gv }).collect();
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::Sigmoid { x } => {
                let dx = node.value.data().iter().zip(gd).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(v, gv)| gv / v).collect();
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(v, gv)| gv * stable_sigmoid(*v)).collect();
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::Sum { x } => {
                accumulate(adj, *x, Tensor::filled(self.value(*x).shape(), gd[0]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                accumulate(adj, *x, Tensor::filled(self.value(*x).shape(), gd[0] / n));
            }
            Op::SumRows { x } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let dx = (0..xv.len()).map(|e| gd[e % c]).collect();
                accumulate(adj, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::RowL2Normalize { x, inv_norms } => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut dx = vec![0.0; y.len()];
                for (i, ((dr, yr), gr)) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)).enumerate() {
                    let inv = inv_norms[i];
                    if inv == 0.0 {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) * inv;
                    }
                }
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in gd.chunks(c.max(1)).zip(xhat.chunks(c.max(1))) {
                    for j in 0..gr.len() {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                if self.needs(*gamma) {
                    accumulate(adj, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), sum_gx.clone()).expect("shape"));
                }
                if self.needs(*beta) {
                    accumulate(adj, *beta, Tensor::new(self.value(*beta).shape().to_vec(), sum_g.clone()).expect("shape"));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * c];
                    let nf = n as f64;
                    let k: Vec<f64> = (0..c).map(|j| gam[j] * inv_std[j]).collect();
                    for ((dr, gr), hr) in dx.chunks_mut(c.max(1)).zip(gd.chunks(c.max(1))).zip(xhat.chunks(c.max(1))) {
                        if *train {
                            for j in 0..dr.len() {
                                dr[j] = k[j] / nf * (nf * gr[j] - sum_g[j] - hr[j] * sum_gx[j]);
                            }
                        } else {
                            for j in 0..dr.len() {
                                dr[j] = k[j] * gr[j];
                            }
                        }
                    }
                    accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (e, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += gd[e * c + j];
                    }
                }
                accumulate(adj, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for w in offsets.windows(2) {
                    let span = w[0]..w[1];
                    let dot: f64 = y[span.clone()].iter().zip(&gd[span.clone()]).map(|(a, b)| a * b).sum();
                    for e in span {
                        dx[e] = y[e] * (gd[e] - dot);
                    }
                }
                accumulate(adj, *x, Tensor::new(node.value.shape().to_vec(), dx).expect("shape"));
            }
            Op::EdgeAggregate { coef, values, src, dst } => {
                let cv = self.value(*coef);
                let vv = self.value(*values);
                let d = vv.cols();
                if self.needs(*coef) {
                    let dc = src
                        .iter()
                        .zip(dst.iter())
                        .map(|(&s, &t)| {
                            gd[s * d..(s + 1) * d].iter().zip(&vv.data()[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    accumulate(adj, *coef, Tensor::new(cv.shape().to_vec(), dc).expect("shape"));
                }
                if self.needs(*values) {
                    let mut dv = vec![0.0; vv.len()];
                    for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
                        let w = cv.data()[e];
                        for j in 0..d {
                            dv[t * d + j] += w * gd[s * d + j];
                        }
                    }
                    accumulate(adj, *values, Tensor::new(vv.shape().to_vec(), dv).expect("shape"));
                }
            }
            Op::SpMM { m, x } => {
                accumulate(adj, *x, m.transpose_matmul(g));
            }
            Op::SoftmaxCrossEntropy { logits, rows, targets, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gd[0] / rows.len() as f64;
                let mut dl = vec![0.0; lv.len()];
                for (k, (&r, &t)) in rows.iter().zip(targets.iter()).enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[k * c + j] - onehot);
                    }
                }
                accumulate(adj, *logits, Tensor::new(lv.shape().to_vec(), dl).expect("shape"));
            }
        }
    }
}

const ROW_NORM_GUARD: f64 = 1e-12;

/// `f(a, b)` elementwise with `b` broadcast per `bcast`; `a` has `cols` columns.
#[inline(always)]
fn broadcast(a: &[f64], b: &[f64], cols: usize, bcast: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    let c = cols.max(1);
    match bcast {
        Bcast::Same => out.iter_mut().zip(a).zip(b).for_each(|((o, x), y)| *o = f(*x, *y)),
        Bcast::Row => {
            for (or, ar) in out.chunks_mut(c).zip(a.chunks(c)) {
                or.iter_mut().zip(ar).zip(b).for_each(|((o, x), y)| *o = f(*x, *y));
            }
        }
        Bcast::Col => {
            for ((or, ar), y) in out.chunks_mut(c).zip(a.chunks(c)).zip(b) {
                or.iter_mut().zip(ar).for_each(|(o, x)| *o = f(*x, *y));
            }
        }
        Bcast::Scalar => out.iter_mut().zip(a).for_each(|(o, x)| *o = f(*x, b[0])),
    }
    out
}

/// Sum `local` (shaped like the left operand) down to the broadcast operand's shape.
fn reduce_broadcast(local: Vec<f64>, len: usize, cols: usize, bcast: Bcast) -> Vec<f64> {
    let c = cols.max(1);
    match bcast {
        Bcast::Same => local,
        Bcast::Row => {
            let mut out = vec![0.0; len];
            for row in local.chunks(c) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out
        }
        Bcast::Col => local.chunks(c).map(|row| row.iter().sum()).collect(),
        Bcast::Scalar => vec![local.iter().sum()],
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Gradient for every trainable parameter in `store`. Parameters bound
    /// to the tape more than once get the sum; unreached ones get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> BTreeMap<ParamId, Tensor> {
        let mut out: BTreeMap<ParamId, Tensor> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, Tensor::zeros(p.value.shape())))
            .collect();
        for (adj, pid) in self.adjoints.iter().zip(&self.params) {
            if let (Some(g), Some(pid)) = (adj, pid) {
                if let Some(acc) = out.get_mut(pid) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_uses_slope() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.value(y).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let v = tape.variable(Tensor::row(vec![0.3, -1.2, 2.5, 0.0]));
        let s = tape.row_softmax(v).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(v).unwrap().data().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn sigmoid_cross_entropy_at_zero_logit() {
        // -log σ(z) for label 1 at z = 0 has derivative σ(0) − 1.
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::scalar(0.0));
        let p = tape.sigmoid(z).unwrap();
        let lp = tape.log(p).unwrap();
        let loss = tape.scale(lp, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!((g.wrt(z).unwrap().item() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_and_has_sigmoid_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row(vec![-800.0, 0.0, 800.0]));
        let y = tape.softplus(x).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(3)), Err(NumericsError::BackwardBeforeForward)));
    }

    #[test]
    fn finite_check_catches_log_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.log(x), Err(NumericsError::NonFinite { .. })));
        let mut lax = Tape::new().with_finite_check(false);
        let x = lax.constant(Tensor::scalar(0.0));
        assert!(lax.log(x).is_ok());
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0));
        let b = store.add("b", Tensor::ones(&[2, 2]));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let l = tape.mul(av, av).unwrap();
        let grads = tape.backward(l).unwrap().param_grads(&store);
        assert_eq!(grads[&a].item(), 4.0);
        assert!(grads[&b].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(3, 4, |i, j| (i + j) as f64));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_keeps_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[200, 50]));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn batch_norm_train_standardizes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 100.0 - 30.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(20, 3, data).unwrap());
        let g = tape.constant(Tensor::ones(&[1, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        for j in 0..3 {
            let col: Vec<f64> = (0..20).map(|i| out.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn segment_softmax_groups_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(vec![1.0, 2.0, 3.0, -4.0, 0.5]));
        let offsets: Arc<[usize]> = vec![0, 3, 3, 5].into();
        let y = tape.segment_softmax(x, offsets).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_shapes_rejected_when_incompatible() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3, 2]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        assert!(tape.add(a, b).is_err());
    }
}
