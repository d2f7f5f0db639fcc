//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! Every op evaluates eagerly, checks its output for NaN/Inf, and records
//! enough to replay its vector-Jacobian product. `backward` walks the tape
//! once in reverse from a scalar loss.

use std::sync::Arc;

use super::params::ParamStore;
use super::sparse::SparseMatrix;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(String),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    SpMM(Arc<SparseMatrix>, Var),
    Dropout(Var, Arc<Vec<f64>>),
    RowNormalize(Var),
    BceWithLogits(Var, Arc<Vec<f64>>),
    Jsd(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SpMM(..) => "spmm",
            Op::Dropout(..) => "dropout",
            Op::RowNormalize(_) => "row_normalize",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Jsd(..) => "jsd",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter or input leaf feeds this node.
    tracked: bool,
}

/// Eagerly evaluated computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_EPS: f64 = 1e-12;

fn shape2(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

/// Output shape of a broadcasting binary op over matrices. Each dimension
/// must match or be 1 on one side.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

/// Sum a full-size gradient down to a broadcast operand's shape.
fn reduce_to(grad: &[f64], out: (usize, usize), target: (usize, usize)) -> Tensor {
    if out == target {
        return Tensor::matrix(target.0, target.1, grad.to_vec()).unwrap();
    }
    let mut t = Tensor::zeros(target.0, target.1);
    let data = t.data_mut();
    for i in 0..out.0 {
        for j in 0..out.1 {
            data[bidx(target, i, j)] += grad[i * out.1 + j];
        }
    }
    t
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape2(&self.nodes[v.0].value)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            let bad = value
                .data()
                .iter()
                .position(|x| !x.is_finite())
                .unwrap_or(0);
            return Err(Error::Numeric {
                op: op.name(),
                node,
                detail: format!(
                    "non-finite value {} at flat index {bad}",
                    value.data()[bad]
                ),
            });
        }
        let tracked = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Jsd(a, b) => self.tracked(*a) || self.tracked(*b),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.tracked(*v)),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::SoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::SpMM(_, a)
            | Op::Dropout(a, _)
            | Op::RowNormalize(a)
            | Op::BceWithLogits(a, _) => self.tracked(*a),
        };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(node))
    }

    fn mismatch(&self, op: &str, a: Var, b: Var) -> Error {
        Error::contract(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        ))
    }

    // ---- leaves ----

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`] but that is not
    /// bound to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input)
    }

    /// Snapshot a named parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .clone();
        self.push(value, Op::Param(name.to_string()))
    }

    /// Like [`Tape::param`] but recorded as a constant, for frozen weights.
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .clone();
        self.constant(value)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            0.0,
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`; `b` is `n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            out.data_mut(),
            0.0,
        );
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Sparse constant times dense value.
    pub fn spmm(&mut self, matrix: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if matrix.cols() != r {
            return Err(Error::contract(format!(
                "spmm: sparse matrix has {} columns, dense input has {} rows",
                matrix.cols(),
                r
            )));
        }
        let out = matrix.mul_dense(self.value(x).data(), c);
        let out = Tensor::matrix(matrix.rows(), c, out)?;
        self.push(out, Op::SpMM(Arc::clone(matrix), x))
    }

    // ---- broadcasting elementwise ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, (usize, usize))> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| self.mismatch(name, a, b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(out_shape.0 * out_shape.1);
        if sa == sb {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..out_shape.0 {
                for j in 0..out_shape.1 {
                    out.push(f(av[bidx(sa, i, j)], bv[bidx(sb, i, j)]));
                }
            }
        }
        Ok((Tensor::matrix(out_shape.0, out_shape.1, out)?, out_shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + value);
        self.push(out, Op::AddScalar(a))
    }

    // ---- pointwise nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Inverted dropout. `keep_mask` holds `0` or `1/keep_prob` per element.
    pub fn dropout_with_mask(&mut self, a: Var, keep_mask: Vec<f64>) -> Result<Var> {
        if keep_mask.len() != self.value(a).len() {
            return Err(Error::contract("dropout mask length differs from input"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&keep_mask)
            .map(|(x, m)| x * m)
            .collect();
        let (r, c) = self.shape(a);
        let out = Tensor::matrix(r, c, data)?;
        self.push(out, Op::Dropout(a, Arc::new(keep_mask)))
    }

    // ---- row-wise ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).clone();
        for i in 0..r {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let _ = c;
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `r x 1` column of per-row `ln Σ_j exp(a_ij)`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        let v = self.value(a);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let row = v.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Tensor::col_vector(out), Op::LogSumExpRows(a))
    }

    /// L2-normalizes every row.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        let mut out = self.value(a).clone();
        for i in 0..r {
            let row = out.row_mut(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        self.push(out, Op::RowNormalize(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::contract("mean_rows of a matrix with no rows"));
        }
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        let v = self.value(a);
        let out = (0..r).map(|i| v.row(i).iter().sum()).collect();
        self.push(Tensor::col_vector(out), Op::SumCols(a))
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|v| self.shape(*v).0)
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        if parts.iter().any(|v| self.shape(*v).0 != rows) {
            return Err(Error::contract("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|v| self.shape(*v).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for v in parts {
            let (_, c) = self.shape(*v);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + c].copy_from_slice(self.value(*v).row(i));
            }
            offset += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|v| self.shape(*v).1)
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        if parts.iter().any(|v| self.shape(*v).1 != cols) {
            return Err(Error::contract("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for v in parts {
            data.extend_from_slice(self.value(*v).data());
            rows += self.shape(*v).0;
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let (r, _) = self.shape(a);
        if let Some(bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of {r} rows"
            )));
        }
        let out = self.value(a).select_rows(&indices);
        self.push(out, Op::GatherRows(a, indices))
    }

    /// Row `i` of `a` is added into output row `indices[i]`.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        indices: Arc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<Var> {
        let (r, c) = self.shape(a);
        if indices.len() != r {
            return Err(Error::contract("scatter_add_rows: one index per row required"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(Error::contract(format!(
                "scatter_add_rows index {bad} out of {out_rows} rows"
            )));
        }
        let mut out = Tensor::zeros(out_rows, c);
        let v = self.value(a);
        for (i, &target) in indices.iter().enumerate() {
            for (o, x) in out.row_mut(target).iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        self.push(out, Op::ScatterAddRows(a, indices))
    }

    // ---- fused losses ----

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != labels.len() {
            return Err(Error::contract("bce_with_logits: one label per logit required"));
        }
        if v.is_empty() {
            return Err(Error::contract("bce_with_logits: empty score list"));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(&labels)
            .map(|(&s, &y)| softplus(s) - y * s)
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        self.push(out, Op::BceWithLogits(logits, Arc::new(labels)))
    }

    /// Jensen-Shannon divergence between two distributions of equal length.
    /// Entries must be strictly positive on the tape; zero-mass inputs go
    /// through the plain function in the losses module instead.
    pub fn jsd(&mut self, p: Var, q: Var) -> Result<Var> {
        let pv = self.value(p);
        let qv = self.value(q);
        if pv.len() != qv.len() {
            return Err(self.mismatch("jsd", p, q));
        }
        let mut total = 0.0;
        for (&a, &b) in pv.data().iter().zip(qv.data()) {
            let m = 0.5 * (a + b);
            total += 0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln();
        }
        self.push(Tensor::scalar(total), Op::Jsd(p, q))
    }

    // ---- reverse pass ----

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.tracked(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                existing.add_assign(&g).expect("gradient shape is fixed by the op");
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.tracked(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, ga.data_mut(), 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, gb.data_mut(), 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T, a: m x k, b: n x k
                let (m, k) = self.shape(*a);
                let (n, _) = self.shape(*b);
                if self.tracked(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, gd, false, self.value(*b).data(), false, ga.data_mut(), 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = Tensor::zeros(n, k);
                    gemm(n, m, k, gd, true, self.value(*a).data(), false, gb.data_mut(), 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let so = shape2(out);
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.tracked(*a) {
                    self.accumulate(grads, *a, reduce_to(gd, so, self.shape(*a)));
                }
                if self.tracked(*b) {
                    let mut gb = reduce_to(gd, so, self.shape(*b));
                    gb.scale_in_place(sign);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let so = shape2(out);
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let is_div = matches!(node.op, Op::Div(..));
                if self.tracked(*a) {
                    let mut full = vec![0.0; so.0 * so.1];
                    for i in 0..so.0 {
                        for j in 0..so.1 {
                            let y = bv[bidx(sb, i, j)];
                            let k = i * so.1 + j;
                            full[k] = if is_div { gd[k] / y } else { gd[k] * y };
                        }
                    }
                    self.accumulate(grads, *a, reduce_to(&full, so, sa));
                }
                if self.tracked(*b) {
                    let mut full = vec![0.0; so.0 * so.1];
                    for i in 0..so.0 {
                        for j in 0..so.1 {
                            let x = av[bidx(sa, i, j)];
                            let y = bv[bidx(sb, i, j)];
                            let k = i * so.1 + j;
                            full[k] = if is_div {
                                -gd[k] * x / (y * y)
                            } else {
                                gd[k] * x
                            };
                        }
                    }
                    self.accumulate(grads, *b, reduce_to(&full, so, sb));
                }
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, g.map(|x| x * factor));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::Tanh(a) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &y)| gi * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::Sigmoid(a) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::Exp(a) => {
                let data = gd.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let data = gd.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * sigmoid(xi))
                    .collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::Dropout(a, mask) => {
                let data = gd.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                self.accumulate(grads, *a, like(out, data));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = shape2(out);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let (r, c) = shape2(x);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let lse = out.data()[i];
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = gd[i] * (x.get(i, j) - lse).exp();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let (r, c) = shape2(x);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let xr = x.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row(i);
                    let gy = g.row(i);
                    let o = ga.row_mut(i);
                    if norm <= NORM_EPS {
                        for j in 0..c {
                            o[j] = gy[j] / NORM_EPS;
                        }
                        continue;
                    }
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        o[j] = (gy[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, gd[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Tensor::full(r, c, gd[0] / n));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let div = if matches!(node.op, Op::MeanRows(_)) {
                    r as f64
                } else {
                    1.0
                };
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(gd) {
                        *o = x / div;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(gd[i]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = shape2(out);
                let mut offset = 0;
                for v in parts {
                    let (_, c) = self.shape(*v);
                    if self.tracked(*v) {
                        let mut gv = Tensor::zeros(rows, c);
                        for i in 0..rows {
                            gv.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, *v, gv);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let n = self.value(*v).len();
                    if self.tracked(*v) {
                        let (r, c) = self.shape(*v);
                        let gv = Tensor::matrix(r, c, gd[offset..offset + n].to_vec())?;
                        self.accumulate(grads, *v, gv);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let (_, len) = shape2(out);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let ga = g.select_rows(idx);
                self.accumulate(grads, *a, ga);
            }
            Op::SpMM(matrix, x) => {
                let (_, c) = shape2(out);
                let data = matrix.transpose_mul_dense(gd, c);
                let (r, _) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::matrix(r, c, data)?);
            }
            Op::BceWithLogits(logits, labels) => {
                let x = self.value(*logits);
                let n = labels.len() as f64;
                let data = x
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&s, &y)| gd[0] * (sigmoid(s) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, like(x, data));
            }
            Op::Jsd(p, q) => {
                let pv = self.value(*p);
                let qv = self.value(*q);
                let mut gp = Vec::with_capacity(pv.len());
                let mut gq = Vec::with_capacity(pv.len());
                for (&a, &b) in pv.data().iter().zip(qv.data()) {
                    let m = 0.5 * (a + b);
                    gp.push(gd[0] * 0.5 * (a / m).ln());
                    gq.push(gd[0] * 0.5 * (b / m).ln());
                }
                self.accumulate(grads, *p, like(pv, gp));
                self.accumulate(grads, *q, like(qv, gq));
            }
        }
        Ok(())
    }

    /// Parameter names in first-use order, with their tape handles.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Param(name) => Some((name.as_str(), Var(i))),
            _ => None,
        })
    }
}

fn like(shape_of: &Tensor, data: Vec<f64>) -> Tensor {
    let (r, c) = shape_of.dims2();
    Tensor::matrix(r, c, data).expect("pointwise gradient keeps its shape")
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked value, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the store. A parameter snapshotted
    /// more than once has all its uses summed.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, var) in tape.params() {
            if let Some(g) = self.wrt(var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row_vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.zero_grad();
        grads.accumulate_into(&tape, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row_vector(vec![1.0, 2.0]));
        store.zero_grad();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss)
                .unwrap()
                .accumulate_into(&tape, &mut store)
                .unwrap();
        }
        assert_eq!(store.grad("w").unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_reports_op() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0)).unwrap();
        match tape.log(x) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 30.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for i in 0..2 {
            let row = v.row(i);
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(3, 2)).unwrap();
        let b = tape.input(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0; 6]);
    }
}
