use crate::error::{Error, Result};

use super::kernels::{
    log_softmax_in_place, matmul_a_bt_into, matmul_at_b_into, matmul_into, sigmoid,
    softmax_in_place,
};
use super::Tensor;

/// Denominator floor used by the cumulative-product alignment recurrence.

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Data<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Data<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Data::Owned(v) => v,
            Data::Borrowed(s) => s,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Maximum(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    Rows(Var, usize),
    Cols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    L2Norm(Var),
    CumSum { x: Var, exclusive: bool },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64 },
    Im2ColCausal { x: Var, kernel: usize, stride: usize },
    MonotonicAlignment(Var),
    Select(Var, usize),
}

struct Node<'a> {
    shape: Vec<usize>,
    data: Data<'a>,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Define-by-run recording of one forward pass.
///
/// Parameters are borrowed for the lifetime `'a`, everything else is owned.
/// Gradients are produced by a single call to [`Tape::backward`]; a second
/// call without [`Tape::reset_grads`] is rejected.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data: Data::Owned(data),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ── leaves ───────────────────────────────────────────────────────────

    /// Records an owned copy of `t`; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: Data::Owned(t.data.clone()),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("input", shape, &[data.len()]));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data: Data::Owned(data),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.nodes.push(Node {
            shape: Vec::new(),
            data: Data::Owned(vec![value]),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter tensor without copying it. `id` is reported back by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: Data::Borrowed(&t.data),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Value-identical copy through which no gradient flows.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let shape = node.shape.clone();
        let data = node.data.as_slice().to_vec();
        self.nodes.push(Node {
            shape,
            data: Data::Owned(data),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ── accessors ────────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(self.shape(v)).ok_or_else(|| Error::shape(op, self.shape(v), &[0, 0]))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims("transpose", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.is_empty() {
            Ok(sa.to_vec())
        } else if sa.is_empty() {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_with(&self, a: Var, b: Var, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (self.value(a), self.value(b));
        (0..n)
            .map(|i| f(x[if x.len() == 1 { 0 } else { i }], y[if y.len() == 1 { 0 } else { i }]))
            .collect()
    }

    /// Elementwise sum; a scalar (`shape == []`) operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("add", a, b)?;
        let out = self.zip_with(a, b, numel(&shape), |x, y| x + y);
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("sub", a, b)?;
        let out = self.zip_with(a, b, numel(&shape), |x, y| x - y);
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("mul", a, b)?;
        let out = self.zip_with(a, b, numel(&shape), |x, y| x * y);
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("div", self.shape(a), self.shape(b)));
        }
        if self.value(b).iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let shape = self.shape(a).to_vec();
        let out = self.zip_with(a, b, numel(&shape), |x, y| x / y);
        Ok(self.push(shape, out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a), &[a])
    }

    /// `x[m×n] + b[n]`, the bias added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims("add_bias", x)?;
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let (xv, bv) = (self.value(x), self.value(b));
        let out = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
        Ok(self.push(vec![m, n], out, Op::AddBias(x, b), &[x, b]))
    }

    /// `y[i,j] = x[i,j] · v[i]`.
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims("scale_rows", x)?;
        if self.shape(v) != [m] {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(v)));
        }
        let (xv, vv) = (self.value(x), self.value(v));
        let out = (0..m * n).map(|i| xv[i] * vv[i / n]).collect();
        Ok(self.push(vec![m, n], out, Op::ScaleRows(x, v), &[x, v]))
    }

    /// `y[i,j] = x[i,j] · v[j]`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims("scale_cols", x)?;
        if self.shape(v) != [n] {
            return Err(Error::shape("scale_cols", self.shape(x), self.shape(v)));
        }
        let (xv, vv) = (self.value(x), self.value(v));
        let out = (0..m * n).map(|i| xv[i] * vv[i % n]).collect();
        Ok(self.push(vec![m, n], out, Op::ScaleCols(x, v), &[x, v]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "negative argument".into(),
            });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("maximum", self.shape(a), self.shape(b)));
        }
        let shape = self.shape(a).to_vec();
        let out = self.zip_with(a, b, numel(&shape), f64::max);
        Ok(self.push(shape, out, Op::Maximum(a, b), &[a, b]))
    }

    // ── normalizations ───────────────────────────────────────────────────

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = match (shape.as_slice(), axis) {
            ([_], 0) | ([_, _], 1) => {
                let n = *shape.last().unwrap();
                let mut out = self.value(a).to_vec();
                if n > 0 {
                    out.chunks_mut(n).for_each(softmax_in_place);
                }
                out
            }
            ([m, n], 0) => {
                let (m, n) = (*m, *n);
                let x = self.value(a);
                let mut out = vec![0.0; m * n];
                let mut col = vec![0.0; m];
                for j in 0..n {
                    for i in 0..m {
                        col[i] = x[i * n + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..m {
                        out[i * n + j] = col[i];
                    }
                }
                out
            }
            _ => return Err(Error::shape("softmax", &shape, &[axis])),
        };
        Ok(self.push(shape, out, Op::Softmax(a, axis), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("log_softmax", &shape, &[1]))?;
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n.max(1)).for_each(log_softmax_in_place);
        Ok(self.push(shape, out, Op::LogSoftmax(a), &[a]))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims("layer_norm", x)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm { x, gain, bias, eps },
            &[x, gain, bias],
        ))
    }

    // ── indexing and layout ──────────────────────────────────────────────

    /// Gathers rows of `table[V×D]` → `[ids.len()×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!("token id {bad} out of vocabulary {v}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims("rows", x)?;
        if start > end || end > m {
            return Err(Error::shape("rows", &[m, n], &[start, end]));
        }
        let out = self.value(x)[start * n..end * n].to_vec();
        Ok(self.push(vec![end - start, n], out, Op::Rows(x, start), &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims("cols", x)?;
        if start > end || end > n {
            return Err(Error::shape("cols", &[m, n], &[start, end]));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        Ok(self.push(vec![m, w], out, Op::Cols(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims("concat_rows", parts[0])?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims("concat_rows", p)?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            m += pm;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// Element `index` of a flat tensor as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::shape("select", self.shape(x), &[index]));
        }
        let out = vec![self.value(x)[index]];
        Ok(self.push(Vec::new(), out, Op::Select(x, index), &[x]))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    /// Sum of a matrix over `axis`: 0 → `[n]`, 1 → `[m]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims("sum_axis", x)?;
        let xv = self.value(x);
        let out = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    out.iter_mut().zip(&xv[i * n..(i + 1) * n]).for_each(|(o, v)| *o += v);
                }
                out
            }
            1 => (0..m).map(|i| xv[i * n..(i + 1) * n].iter().sum()).collect(),
            _ => return Err(Error::shape("sum_axis", &[m, n], &[axis])),
        };
        let shape = vec![out.len()];
        Ok(self.push(shape, out, Op::SumAxis(x, axis), &[x]))
    }

    /// Frobenius (flat L2) norm.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Vec::new(), vec![s], Op::L2Norm(x), &[x])
    }

    /// Cumulative sum along the last axis; `exclusive` shifts by one so the
    /// first element is 0.
    pub fn cumsum(&mut self, x: Var, exclusive: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("cumsum", &shape, &[1]))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                let cur = *v;
                if exclusive {
                    *v = acc;
                    acc += cur;
                } else {
                    acc += cur;
                    *v = acc;
                }
            }
        }
        Ok(self.push(shape, out, Op::CumSum { x, exclusive }, &[x]))
    }

    // ── fused losses and layers ──────────────────────────────────────────

    /// Mean over rows of label-smoothed cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (m, v) = self.dims("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", &[m, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target id {bad} out of vocabulary {v}")));
        }
        let mut logp = self.value(logits).to_vec();
        logp.chunks_mut(v).for_each(log_softmax_in_place);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &logp[i * v..(i + 1) * v];
            let mut loss = -(1.0 - smoothing) * row[t];
            if smoothing > 0.0 {
                loss -= smoothing / v as f64 * row.iter().sum::<f64>();
            }
            total += loss;
        }
        Ok(self.push(
            Vec::new(),
            vec![total / m.max(1) as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
            &[logits],
        ))
    }

    /// Unfolds a `[T×C]` sequence into causal windows: output row `n` is the
    /// concatenation of input rows `stride·n − kernel + 1 ..= stride·n`
    /// (zero-padded on the left), giving `ceil(T/stride)` rows of
    /// `kernel·C` columns.
    pub fn im2col_causal(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, c) = self.dims("im2col_causal", x)?;
        let out_len = t.div_ceil(stride);
        let xv = self.value(x);
        let mut out = vec![0.0; out_len * kernel * c];
        for n in 0..out_len {
            for r in 0..kernel {
                let src = (stride * n + r) as isize - (kernel as isize - 1);
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    let dst = n * kernel * c + r * c;
                    out[dst..dst + c].copy_from_slice(&xv[s * c..(s + 1) * c]);
                }
            }
        }
        Ok(self.push(
            vec![out_len, kernel * c],
            out,
            Op::Im2ColCausal { x, kernel, stride },
            &[x],
        ))
    }

    /// Expected hard-monotonic alignment for one head.
    ///
    /// `p[I×J]` holds write probabilities; row `i` of the result is
    /// `α_ij = p_ij·q_ij` where `q_i0 = α_{i−1,0}` and
    /// `q_ij = (1 − p_{i,j−1})·q_{i,j−1} + α_{i−1,j}` is the mass standing
    /// at `j`, with `α_0` all mass on the first position.
    pub fn monotonic_alignment(&mut self, p: Var) -> Result<Var> {
        let (i_len, j_len) = self.dims("monotonic_alignment", p)?;
        if self.value(p).iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Domain {
                op: "monotonic_alignment",
                msg: "probabilities must lie in [0, 1]".into(),
            });
        }
        let out = alignment_forward(self.value(p), i_len, j_len);
        Ok(self.push(vec![i_len, j_len], out, Op::MonotonicAlignment(p), &[p]))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let (lo, hi) = self.grads.split_at_mut(id);
            let Some(g) = hi[0].as_deref() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&self.nodes, id, g, lo);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of `v` (zeros when `v` is unreachable from the loss).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    /// `(param id, gradient)` for every bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| Some((n.param?, g.as_deref()?)))
    }
}

pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Forward pass of the alignment recurrence, exposed for the no-grad path.
pub(crate) fn alignment_forward(p: &[f64], i_len: usize, j_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; i_len * j_len];
    let mut prev = vec![0.0; j_len];
    if j_len > 0 {
        prev[0] = 1.0;
    }
    let mut q = vec![0.0; j_len];
    for i in 0..i_len {
        let pi = &p[i * j_len..(i + 1) * j_len];
        carried_mass(pi, &prev, &mut q);
        for j in 0..j_len {
            out[i * j_len + j] = pi[j] * q[j];
        }
        prev.copy_from_slice(&out[i * j_len..(i + 1) * j_len]);
    }
    out
}

/// `q_j`: mass standing at position `j` before its write decision,
/// `q_0 = prev_0`, `q_j = (1 − p_{j−1})·q_{j−1} + prev_j`.
fn carried_mass(p: &[f64], prev: &[f64], q: &mut [f64]) {
    let mut acc = 0.0;
    for j in 0..q.len() {
        if j > 0 {
            acc *= 1.0 - p[j - 1];
        }
        acc += prev[j];
        q[j] = acc;
    }
}

/// Lazily allocated gradient slot for `v`, or `None` when `v` is constant.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.data.as_slice().len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn val<'n>(nodes: &'n [Node], v: Var) -> &'n [f64] {
    nodes[v.0].data.as_slice()
}

fn shape_of<'n>(nodes: &'n [Node], v: Var) -> &'n [usize] {
    &nodes[v.0].shape
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.data.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(shape_of(nodes, *a)).unwrap();
            let n = shape_of(nodes, *b)[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_a_bt_into(g, val(nodes, *b), m, k, n, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_at_b_into(val(nodes, *a), g, m, k, n, gb);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(shape_of(nodes, *a)).unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate_broadcast(nodes, grads, *a, g, 1.0);
            accumulate_broadcast(nodes, grads, *b, g, sign);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let pick = |v: &[f64], i: usize| v[if v.len() == 1 { 0 } else { i }];
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(bv, i)).collect();
            let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(av, i)).collect();
            accumulate_broadcast(nodes, grads, *a, &ga, 1.0);
            accumulate_broadcast(nodes, grads, *b, &gb, 1.0);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
            }
        }
        Op::AddBias(x, b) => {
            let n = shape_of(nodes, *b)[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
            }
        }
        Op::ScaleRows(x, v) => {
            let n = shape_of(nodes, *x)[1];
            let (xv, vv) = (val(nodes, *x), val(nodes, *v));
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, gi) in g.iter().enumerate() {
                    gx[i] += gi * vv[i / n];
                }
            }
            if let Some(gv) = slot(nodes, grads, *v) {
                for (i, gi) in g.iter().enumerate() {
                    gv[i / n] += gi * xv[i];
                }
            }
        }
        Op::ScaleCols(x, v) => {
            let n = shape_of(nodes, *x)[1];
            let (xv, vv) = (val(nodes, *x), val(nodes, *v));
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, gi) in g.iter().enumerate() {
                    gx[i] += gi * vv[i % n];
                }
            }
            if let Some(gv) = slot(nodes, grads, *v) {
                for (i, gi) in g.iter().enumerate() {
                    gv[i % n] += gi * xv[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            let av = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
        }
        Op::Relu(a) => {
            let av = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        ga[i] += g[i] / (2.0 * y[i]);
                    }
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let av = val(nodes, *a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] >= *lo && av[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Maximum(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let a_wins: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x >= y).collect();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if a_wins[i] {
                        ga[i] += g[i];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    if !a_wins[i] {
                        gb[i] += g[i];
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let shape = &node.shape;
            if let Some(ga) = slot(nodes, grads, *a) {
                let (m, n) = match shape.as_slice() {
                    [n] => (1, *n),
                    [m, n] => (*m, *n),
                    _ => unreachable!(),
                };
                if shape.len() == 1 || *axis == 1 {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                } else {
                    for j in 0..n {
                        let dot: f64 = (0..m).map(|i| g[i * n + j] * y[i * n + j]).sum();
                        for i in 0..m {
                            let k = i * n + j;
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = *node.shape.last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        ga[r * n + j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (m, n) = dims2(&node.shape).unwrap();
            let (xv, gv) = (val(nodes, *x), val(nodes, *gain));
            let mut gx_all = vec![0.0; m * n];
            let mut g_gain = vec![0.0; n];
            let mut g_bias = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            let mut gxhat = vec![0.0; n];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let (mean, rstd) = row_stats(row, *eps);
                let gr = &g[i * n..(i + 1) * n];
                for j in 0..n {
                    xhat[j] = (row[j] - mean) * rstd;
                    g_gain[j] += gr[j] * xhat[j];
                    g_bias[j] += gr[j];
                    gxhat[j] = gr[j] * gv[j];
                }
                let sum_g: f64 = gxhat.iter().sum();
                let sum_gx: f64 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let nf = n as f64;
                for j in 0..n {
                    gx_all[i * n + j] = rstd / nf * (nf * gxhat[j] - sum_g - xhat[j] * sum_gx);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(&gx_all).for_each(|(o, v)| *o += v);
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                gg.iter_mut().zip(&g_gain).for_each(|(o, v)| *o += v);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                gb.iter_mut().zip(&g_bias).for_each(|(o, v)| *o += v);
            }
        }
        Op::Embedding { table, ids } => {
            let d = shape_of(nodes, *table)[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Rows(x, start) => {
            let n = shape_of(nodes, *x)[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                let off = start * n;
                gx[off..off + g.len()].iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        Op::Cols(x, start) => {
            let n = shape_of(nodes, *x)[1];
            let w = node.shape[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, gr) in g.chunks(w.max(1)).enumerate() {
                    let off = i * n + start;
                    gx[off..off + w].iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(nodes, p).len();
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, v)| *o += v);
                }
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.shape[1];
            let mut col = 0;
            for &p in parts {
                let (m, w) = dims2(shape_of(nodes, p)).unwrap();
                if let Some(gp) = slot(nodes, grads, p) {
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * n + col + j];
                        }
                    }
                }
                col += w;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / gx.len().max(1) as f64;
                gx.iter_mut().for_each(|o| *o += s);
            }
        }
        Op::SumAxis(x, axis) => {
            let (m, n) = dims2(shape_of(nodes, *x)).unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                    }
                }
            }
        }
        Op::L2Norm(x) => {
            let xv = val(nodes, *x);
            if let Some(gx) = slot(nodes, grads, *x) {
                if y[0] > 0.0 {
                    for i in 0..xv.len() {
                        gx[i] += g[0] * xv[i] / y[0];
                    }
                }
            }
        }
        Op::CumSum { x, exclusive } => {
            let n = *node.shape.last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, gr) in g.chunks(n.max(1)).enumerate() {
                    let mut acc = 0.0;
                    for j in (0..n).rev() {
                        if *exclusive {
                            gx[r * n + j] += acc;
                            acc += gr[j];
                        } else {
                            acc += gr[j];
                            gx[r * n + j] += acc;
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
        } => {
            let (m, v) = dims2(shape_of(nodes, *logits)).unwrap();
            let lv = val(nodes, *logits);
            if let Some(gl) = slot(nodes, grads, *logits) {
                let scale = g[0] / m as f64;
                let mut row = vec![0.0; v];
                for (i, &t) in targets.iter().enumerate() {
                    row.copy_from_slice(&lv[i * v..(i + 1) * v]);
                    softmax_in_place(&mut row);
                    for j in 0..v {
                        let mut q = smoothing / v as f64;
                        if j == t {
                            q += 1.0 - smoothing;
                        }
                        gl[i * v + j] += scale * (row[j] - q);
                    }
                }
            }
        }
        Op::Im2ColCausal { x, kernel, stride } => {
            let (t, c) = dims2(shape_of(nodes, *x)).unwrap();
            let out_len = node.shape[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                for n in 0..out_len {
                    for r in 0..*kernel {
                        let src = (stride * n + r) as isize - (*kernel as isize - 1);
                        if src >= 0 && (src as usize) < t {
                            let s = src as usize;
                            let off = n * kernel * c + r * c;
                            for k in 0..c {
                                gx[s * c + k] += g[off + k];
                            }
                        }
                    }
                }
            }
        }
        Op::MonotonicAlignment(p) => {
            let (i_len, j_len) = dims2(shape_of(nodes, *p)).unwrap();
            if let Some(gp) = slot(nodes, grads, *p) {
                alignment_backward(val(nodes, *p), y, g, i_len, j_len, gp);
            }
        }
        Op::Select(x, index) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx[*index] += g[0];
            }
        }
    }
}

fn accumulate_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], sign: f64) {
    if let Some(gv) = slot(nodes, grads, v) {
        if gv.len() == g.len() {
            gv.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
        } else {
            gv[0] += sign * g.iter().sum::<f64>();
        }
    }
}

/// Reverse pass through [`alignment_forward`]; `q` is recomputed per row.
fn alignment_backward(p: &[f64], alpha: &[f64], g: &[f64], i_len: usize, j_len: usize, gp: &mut [f64]) {
    // Running gradient w.r.t. α_i: upstream plus contributions from step i+1.
    let mut g_alpha: Vec<f64> = g.to_vec();
    let mut q = vec![0.0; j_len];
    let mut first = vec![0.0; j_len];
    if j_len > 0 {
        first[0] = 1.0;
    }
    for i in (0..i_len).rev() {
        let pi = &p[i * j_len..(i + 1) * j_len];
        let prev: &[f64] = if i == 0 { &first } else { &alpha[(i - 1) * j_len..i * j_len] };
        carried_mass(pi, prev, &mut q);
        let (before, rest) = g_alpha.split_at_mut(i * j_len);
        let ga = &rest[..j_len];
        let mut g_next = 0.0;
        for j in (0..j_len).rev() {
            let mut gq = ga[j] * pi[j];
            let mut gpj = ga[j] * q[j];
            if j + 1 < j_len {
                gq += g_next * (1.0 - pi[j]);
                gpj -= g_next * q[j];
            }
            gp[i * j_len + j] += gpj;
            if i > 0 {
                before[(i - 1) * j_len + j] += gq;
            }
            g_next = gq;
        }
    }
}
