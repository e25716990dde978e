//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in reverse registration order and accumulates adjoints
//! into the inputs that require gradients. Parameters are borrowed from a
//! [`ModelParams`] store for the lifetime of the tape, so forward passes do
//! not copy weights.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::ModelParams;
use super::tensor::{check_shape, numel_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulColBroadcast(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    MeanCols(Var),
    GatherRow(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    Pick(Var, usize),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
}

/// Payload-free primitive kind, exposed for tape inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatVec,
    VecMat,
    Add,
    Sub,
    Mul,
    MulColBroadcast,
    Scale,
    OneMinus,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    Concat,
    Stack,
    MeanCols,
    GatherRow,
    Sum,
    Dot,
    Pick,
    Reshape,
    CrossEntropy,
    Conv2d,
}

/// One recorded primitive: its kind plus input and output shapes.
#[derive(Clone, Debug)]
pub struct OpRecord<'a> {
    pub kind: OpKind,
    pub inputs: Vec<&'a [usize]>,
    pub output: &'a [usize],
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatVec(..) => OpKind::MatVec,
            Op::VecMat(..) => OpKind::VecMat,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MulColBroadcast(..) => OpKind::MulColBroadcast,
            Op::Scale(..) => OpKind::Scale,
            Op::OneMinus(..) => OpKind::OneMinus,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Concat(..) => OpKind::Concat,
            Op::Stack(..) => OpKind::Stack,
            Op::MeanCols(..) => OpKind::MeanCols,
            Op::GatherRow(..) => OpKind::GatherRow,
            Op::Sum(..) => OpKind::Sum,
            Op::Dot(..) => OpKind::Dot,
            Op::Pick(..) => OpKind::Pick,
            Op::Reshape(..) => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Conv2d { .. } => OpKind::Conv2d,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::VecMat(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulColBroadcast(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::OneMinus(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x)
            | Op::MeanCols(x)
            | Op::GatherRow(x, _)
            | Op::Sum(x)
            | Op::Pick(x, _)
            | Op::Reshape(x) => vec![*x],
            Op::Concat(parts) | Op::Stack(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
        }
    }
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of named parameters, keyed by parameter name.
pub type NamedGrads = BTreeMap<String, Vec<f64>>;

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ModelParams>,
    param_vars: HashMap<String, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            grads: None,
        }
    }

    /// Tape that can look parameters up by name from `params`.
    pub fn with_params(params: &'p ModelParams) -> Self {
        Tape {
            params: Some(params),
            ..Tape::new()
        }
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        self.push(Cow::Owned(value), shape, op)
    }

    fn leaf(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named parameter. Repeated lookups return the same node so
    /// that gradient contributions accumulate in one place.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::Autodiff("tape has no parameter store".into()))?;
        let t = params.get(name)?;
        let v = self.leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), t.requires_grad());
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records an owned tensor as a leaf; it requires grad iff the tensor does.
    pub fn tensor(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), shape, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.leaf(Cow::Owned(data), shape, false))
    }

    pub fn constant_ref(&mut self, shape: Vec<usize>, data: &'p [f64]) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.leaf(Cow::Borrowed(data), shape, false))
    }

    /// Leaf that requires a gradient (free input for gradient checks).
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.leaf(Cow::Owned(data), shape, true))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded primitives in registration order.
    pub fn records(&self) -> impl Iterator<Item = OpRecord<'_>> {
        self.nodes.iter().map(move |n| OpRecord {
            kind: n.op.kind(),
            inputs: n.op.inputs().iter().map(|v| self.nodes[v.0].shape.as_slice()).collect(),
            output: &n.shape,
        })
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what} expects a matrix, got shape {}", shape_str(s)))),
        }
    }

    fn vec_len(&self, v: Var, what: &str) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            s => Err(Error::dim(format!("{what} expects a vector, got shape {}", shape_str(s)))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {} and {} differ",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain(format!("{what} received a non-finite input")));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: shapes {} and {} have mismatched inner extents",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push_owned(out, vec![m, n], Op::MatMul(a, b)))
    }

    /// `w[m×k] · x[k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(w, "matvec")?;
        let k2 = self.vec_len(x, "matvec")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matvec: shapes {} and {} have mismatched inner extents",
                shape_str(self.shape(w)),
                shape_str(self.shape(x))
            )));
        }
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv[i * k..(i + 1) * k];
                row.iter().zip(xv).fold(0.0, |acc, (a, b)| acc + a * b)
            })
            .collect();
        Ok(self.push_owned(out, vec![m], Op::MatVec(w, x)))
    }

    /// `v[r]ᵀ · m[r×c]`, a vector of length `c`.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let r = self.vec_len(v, "vecmat")?;
        let (r2, c) = self.mat_dims(m, "vecmat")?;
        if r != r2 {
            return Err(Error::dim(format!(
                "vecmat: shapes {} and {} have mismatched inner extents",
                shape_str(self.shape(v)),
                shape_str(self.shape(m))
            )));
        }
        let (vv, mv) = (self.value(v), self.value(m));
        let mut out = vec![0.0; c];
        for i in 0..r {
            let row = &mv[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += vv[i] * row[j];
            }
        }
        Ok(self.push_owned(out, vec![c], Op::VecMat(v, m)))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(out, shape, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "hadamard", |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `i` of `m[r×c]` by `v[i]`.
    pub fn mul_col_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(m, "mul_col_broadcast")?;
        let r2 = self.vec_len(v, "mul_col_broadcast")?;
        if r != r2 {
            return Err(Error::dim(format!(
                "mul_col_broadcast: shapes {} and {} disagree",
                shape_str(self.shape(m)),
                shape_str(self.shape(v))
            )));
        }
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(mv[i * c..(i + 1) * c].iter().map(|x| x * vv[i]));
        }
        Ok(self.push_owned(out, vec![r, c], Op::MulColBroadcast(m, v)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_owned(out, shape, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xv[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(self.push_owned(out, shape, Op::Softmax(x, axis)))
    }

    /// Log-softmax of a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.vec_len(x, "log_softmax")?;
        self.check_finite(x, "log_softmax")?;
        let out = log_softmax(self.value(x));
        let shape = self.shape(x).to_vec();
        Ok(self.push_owned(out, shape, Op::LogSoftmax(x)))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero parts"));
        }
        let mut out = Vec::new();
        for &p in parts {
            self.vec_len(p, "concat")?;
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        Ok(self.push_owned(out, vec![n], Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::dim("stack of zero rows"));
        }
        let width = self.vec_len(rows[0], "stack")?;
        let mut out = Vec::with_capacity(width * rows.len());
        for &r in rows {
            if self.vec_len(r, "stack")? != width {
                return Err(Error::dim(format!(
                    "stack: row shape {} differs from [{width}]",
                    shape_str(self.shape(r))
                )));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push_owned(out, vec![rows.len(), width], Op::Stack(rows.to_vec())))
    }

    /// Mean of the columns of `x[r×c]`, a vector of length `r`.
    pub fn mean_over_columns(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "mean_over_columns")?;
        let xv = self.value(x);
        let out = (0..r)
            .map(|i| xv[i * c..(i + 1) * c].iter().fold(0.0, |a, b| a + b) / c as f64)
            .collect();
        Ok(self.push_owned(out, vec![r], Op::MeanCols(x)))
    }

    /// Row `index` of `table[n×d]` (embedding lookup).
    pub fn gather_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let (n, d) = self.mat_dims(table, "gather_row")?;
        if index >= n {
            return Err(Error::Vocabulary(format!(
                "row index {index} out of range for table with {n} rows"
            )));
        }
        let out = self.value(table)[index * d..(index + 1) * d].to_vec();
        Ok(self.push_owned(out, vec![d], Op::GatherRow(table, index)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(0.0, |a, b| a + b);
        self.push_owned(vec![s], vec![], Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self.value(a).iter().zip(self.value(b)).fold(0.0, |acc, (x, y)| acc + x * y);
        Ok(self.push_owned(vec![s], vec![], Op::Dot(a, b)))
    }

    /// Element `index` of the flattened tensor as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::dim(format!("pick index {index} out of range for {n} elements")));
        }
        let v = self.value(x)[index];
        Ok(self.push_owned(vec![v], vec![], Op::Pick(x, index)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape, self.value(x).len())?;
        let value = match &self.nodes[x.0].value {
            Cow::Borrowed(b) => Cow::Borrowed(*b),
            Cow::Owned(o) => Cow::Owned(o.clone()),
        };
        Ok(self.push(value, shape, Op::Reshape(x)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T×V]`, over the positions where `mask` is `true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(format!(
                "cross_entropy: {t} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Vocabulary(format!(
                "target id {bad} out of range for vocabulary of size {v}"
            )));
        }
        self.check_finite(logits, "cross_entropy")?;
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::NumericDomain("cross_entropy: every position is masked".into()));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for row in 0..t {
            if mask[row] {
                let ls = log_softmax(&lv[row * v..(row + 1) * v]);
                total += -ls[targets[row]];
            }
        }
        let loss = total / count as f64;
        Ok(self.push_owned(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// 2-D convolution of `input[C×H×W]` with `kernel[O×C×k×k]`, zero padding
    /// `pad` on every side and the given stride.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("conv2d input must be [C,H,W], got {}", shape_str(s)))),
        };
        let (o, kc, kh, kw) = match self.shape(kernel) {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => return Err(Error::dim(format!("conv2d kernel must be [O,C,k,k], got {}", shape_str(s)))),
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d: input shape {} and kernel shape {} disagree on channels",
                shape_str(self.shape(input)),
                shape_str(self.shape(kernel))
            )));
        }
        if let Some(b) = bias {
            if self.vec_len(b, "conv2d bias")? != o {
                return Err(Error::dim(format!("conv2d bias must have {o} entries")));
            }
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim("conv2d: kernel larger than padded input or zero stride"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let (xv, kv) = (self.value(input), self.value(kernel));
        let bv = bias.map(|b| self.value(b));
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kv[((oc * c + ic) * kh + ky) * kw + kx] * xv[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Ok(self.push_owned(
            out,
            vec![o, ho, wo],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every recorded node
    /// that requires one. Fails on a second call until [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if numel_of(self.shape(loss)) != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let grads = self.grads.as_ref()?;
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        match &grads[v.0] {
            Some(g) => Some(g.as_slice()),
            None => None,
        }
    }

    /// Gradients of every parameter recorded on this tape. Parameters that
    /// the loss does not depend on receive zeros.
    pub fn param_grads(&self) -> Result<NamedGrads> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Autodiff("param_grads called before backward".into()))?;
        let mut out = BTreeMap::new();
        for (name, v) in &self.param_vars {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
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
                acc(*b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (m, k) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let (wv, xv) = (&nodes[w.0].value, &nodes[x.0].value);
                acc(*w, &mut |dw| {
                    for i in 0..m {
                        for p in 0..k {
                            dw[i * k + p] += g[i] * xv[p];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        for p in 0..k {
                            dx[p] += wv[i * k + p] * g[i];
                        }
                    }
                });
            }
            Op::VecMat(v, mm) => {
                let (r, c) = (nodes[mm.0].shape[0], nodes[mm.0].shape[1]);
                let (vv, mv) = (&nodes[v.0].value, &nodes[mm.0].value);
                acc(*v, &mut |dv| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += mv[i * c + j] * g[j];
                        }
                        dv[i] += s;
                    }
                });
                acc(*mm, &mut |dm| {
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] += vv[i] * g[j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulColBroadcast(mm, v) => {
                let (r, c) = (nodes[mm.0].shape[0], nodes[mm.0].shape[1]);
                let (mv, vv) = (&nodes[mm.0].value, &nodes[v.0].value);
                acc(*mm, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i * c + j] * vv[i];
                        }
                    }
                });
                acc(*v, &mut |d| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * mv[i * c + j];
                        }
                        d[i] += s;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * s;
                }
            }),
            Op::OneMinus(x) => acc(*x, &mut |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            }),
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let s = (0..len).fold(0.0, |a, k| a + g[idx(k)] * y[idx(k)]);
                            for k in 0..len {
                                d[idx(k)] += y[idx(k)] * (g[idx(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let gs = g.iter().fold(0.0, |a, b| a + b);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] - y[i].exp() * gs;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Stack(rows) => {
                let width = node.shape[1];
                for (r, &p) in rows.iter().enumerate() {
                    acc(p, &mut |d| add_into(d, &g[r * width..(r + 1) * width]));
                }
            }
            Op::MeanCols(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        let gi = g[i] / c as f64;
                        for j in 0..c {
                            d[i * c + j] += gi;
                        }
                    }
                });
            }
            Op::GatherRow(table, index) => {
                let dim = nodes[table.0].shape[1];
                acc(*table, &mut |d| add_into(&mut d[index * dim..(index + 1) * dim], g));
            }
            Op::Sum(x) => acc(*x, &mut |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Dot(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[0] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[0] * av[i];
                    }
                });
            }
            Op::Pick(x, index) => acc(*x, &mut |d| d[*index] += g[0]),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::CrossEntropy { logits, targets, mask } => {
                let (t, v) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let lv = &nodes[logits.0].value;
                let count = mask.iter().filter(|m| **m).count() as f64;
                acc(*logits, &mut |d| {
                    for row in 0..t {
                        if !mask[row] {
                            continue;
                        }
                        let ls = log_softmax(&lv[row * v..(row + 1) * v]);
                        for j in 0..v {
                            let onehot = if j == targets[row] { 1.0 } else { 0.0 };
                            d[row * v + j] += g[0] * (ls[j].exp() - onehot) / count;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (c, h, w) = {
                    let s = &nodes[input.0].shape;
                    (s[0], s[1], s[2])
                };
                let (o, kh, kw) = {
                    let s = &nodes[kernel.0].shape;
                    (s[0], s[2], s[3])
                };
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let (xv, kv) = (&nodes[input.0].value, &nodes[kernel.0].value);
                let (stride, pad) = (*stride, *pad);
                // Visits every (output, kernel tap) pair that reads a real input pixel.
                let each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for oc in 0..o {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let oi = (oc * ho + oy) * wo + ox;
                                for ic in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                            let xi = (ic * h + iy as usize) * w + ix as usize;
                                            f(oi, ki, xi);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                if wants(*input) {
                    acc(*input, &mut |dx| each_tap(&mut |oi, ki, xi| dx[xi] += g[oi] * kv[ki]));
                }
                if wants(*kernel) {
                    acc(*kernel, &mut |dk| each_tap(&mut |oi, ki, xi| dk[ki] += g[oi] * xv[xi]));
                }
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for oc in 0..o {
                            for p in 0..ho * wo {
                                db[oc] += g[oc * ho * wo + p];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    if shape.is_empty() {
        return (1, 1, 1);
    }
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-softmax of a slice with max subtraction.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().fold(0.0, |a, v| a + (v - max).exp()).ln() + max;
    x.iter().map(|v| v - lse).collect()
}
