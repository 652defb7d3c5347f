//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built eagerly: every operation computes its value on
//! creation and records how to push gradients back to its parents. Nodes are
//! appended in creation order, so iterating them backwards is a valid reverse
//! topological order and [`Graph::backward`] visits each node once.
//!
//! Learnable tensors live in a [`ParamStore`]. The graph borrows the store and
//! refers to parameters by [`ParamId`] without copying them.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite evaluation when perturbing {param}[{index}]")]
    NonFinite { param: String, index: usize },
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GradError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix, panicking on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward pass is computed outside the graph and whose
/// backward rule is supplied by the implementor.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; `None` where `needs_grad` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Sin(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Concat(Vec<Var>),
    Columns(Var, usize),
    Clamp(Var, f64, f64),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Eagerly evaluated computation graph over a borrowed [`ParamStore`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(GradError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(GradError::Invalid {
            op,
            msg: format!("expected a matrix, got shape {:?}", t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = a * b (+ beta * c)` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, (k, 1), &tb.data, (n, 1), 0.0, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` bias to every row of an `n x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = require_matrix("add_bias", tx)?;
        if tb.len() != c {
            return Err(GradError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = tx.clone();
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax. Columns with `mask[j] == false` get probability
    /// exactly zero and the remaining columns renormalize among themselves.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (_, c) = require_matrix("softmax", tx)?;
        if let Some(m) = mask {
            if m.len() != c || !m.iter().any(|&b| b) {
                return Err(GradError::Invalid {
                    op: "softmax",
                    msg: format!("mask {m:?} invalid for {c} columns"),
                });
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; tx.len()];
        for (row, o) in tx.data.chunks(c).zip(out.chunks_mut(c)) {
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let shape = tx.shape.clone();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(GradError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Multiplies row `i` of an `n x c` matrix by `scale[i]` (`scale` is `n x 1`).
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        let (n, c) = require_matrix("scale_rows", tx)?;
        if ts.len() != n {
            return Err(GradError::ShapeMismatch {
                op: "scale_rows",
                lhs: tx.shape.clone(),
                rhs: ts.shape.clone(),
            });
        }
        let mut out = tx.clone();
        for (row, s) in out.data.chunks_mut(c.max(1)).zip(&ts.data) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.requires_grad(x) || self.requires_grad(scale);
        Ok(self.push(out, Op::ScaleRows(x, scale), rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(GradError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let n = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_matrix("concat_cols", t)?;
            if r != n {
                return Err(GradError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(*first).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..n {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::matrix(n, total, out),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Column slice `[start, end)` of a matrix.
    pub fn columns(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = require_matrix("columns", t)?;
        if start >= end || end > c {
            return Err(GradError::Invalid {
                op: "columns",
                msg: format!("range {start}..{end} outside {c} columns"),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in t.data.chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::matrix(n, w, out), Op::Columns(x, start), rg))
    }

    /// Selects rows `idx` of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = require_matrix("gather_rows", t)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GradError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of {n}"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Adds row `i` of `x` into row `idx[i]` of an `n`-row zero matrix, so
    /// repeated indices accumulate.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_matrix("scatter_rows", t)?;
        if r != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(GradError::Invalid {
                op: "scatter_rows",
                msg: format!("{} indices for {r} rows into {n}", idx.len()),
            });
        }
        let mut out = vec![0.0; n * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(&t.data[k * c..(k + 1) * c]) {
                *o += v;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::matrix(n, c, out),
            Op::ScatterRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Gradient of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(GradError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(&lt.shape, 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        accumulate_map(&mut out.params, id, g);
                    } else {
                        accumulate_map(&mut out.inputs, i, g);
                    }
                }
                op => self.backprop(op, i, g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = self.value(Var(i));
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, (n, 1), &tb.data, (1, n), 0.0, &mut da);
                    self.send(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, (1, k), &g.data, (n, 1), 0.0, &mut db);
                    self.send(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *b, g.map(|v| -v));
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    self.send(grads, *a, Tensor { shape: g.shape.clone(), data: d });
                }
                if self.requires_grad(*b) {
                    let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    self.send(grads, *b, Tensor { shape: g.shape.clone(), data: d });
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(*b) {
                    let tb = self.value(*b);
                    let c = tb.len();
                    let mut db = vec![0.0; c];
                    for row in g.data.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *b, Tensor { shape: tb.shape.clone(), data: db });
                }
                self.send(grads, *x, g);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(gv, &xv)| gv * sigmoid(xv))
                    .collect();
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Exp(x) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, e)| gv * e).collect();
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Sin(x) => {
                let tx = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(gv, xv)| gv * xv.cos())
                    .collect();
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Softmax(x) => {
                let c = out.shape[1];
                let mut d = vec![0.0; out.len()];
                for ((p, gr), dr) in out.data.chunks(c).zip(g.data.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = p[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape.clone();
                self.send(grads, *x, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let shape = tx.shape.clone();
                let v = g.item() / tx.len() as f64;
                self.send(grads, *x, Tensor::filled(&shape, v));
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.send(grads, *x, g.map(|v| v * f));
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = tx.shape[1].max(1);
                if self.requires_grad(*s) {
                    let ds: Vec<f64> = g
                        .data
                        .chunks(c)
                        .zip(tx.data.chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.send(grads, *s, Tensor { shape: ts.shape.clone(), data: ds });
                }
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for (row, sv) in dx.data.chunks_mut(c).zip(&ts.data) {
                        row.iter_mut().for_each(|v| *v *= sv);
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::Concat(parts) => {
                let n = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        self.send(grads, p, Tensor::matrix(n, w, d));
                    }
                    offset += w;
                }
            }
            Op::Columns(x, start) => {
                let tx = self.value(*x);
                let (n, c) = (tx.shape[0], tx.shape[1]);
                let w = out.shape[1];
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    d[r * c + start..r * c + start + w].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                self.send(grads, *x, Tensor::matrix(n, c, d));
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(gv, &xv)| if xv < *lo || xv > *hi { 0.0 } else { *gv })
                    .collect();
                self.send(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let c = tx.shape[1];
                let mut d = vec![0.0; tx.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g.data[k * c + j];
                    }
                }
                self.send(grads, *x, Tensor { shape: tx.shape.clone(), data: d });
            }
            Op::ScatterRows(x, idx) => {
                let c = out.shape[1];
                let mut d = Vec::with_capacity(idx.len() * c);
                for &r in idx {
                    d.extend_from_slice(&g.data[r * c..(r + 1) * c]);
                }
                self.send(grads, *x, Tensor::matrix(idx.len(), c, d));
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                let result = op.backward(&values, out, &g, &needs)?;
                for ((&v, d), t) in inputs.iter().zip(result).zip(&values) {
                    if let Some(d) = d {
                        if d.shape != t.shape {
                            return Err(GradError::ShapeMismatch {
                                op: op.name(),
                                lhs: t.shape.clone(),
                                rhs: d.shape,
                            });
                        }
                        self.send(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate_map<K: std::hash::Hash + Eq>(map: &mut HashMap<K, Tensor>, key: K, g: Tensor) {
    match map.get_mut(&key) {
        Some(existing) => existing.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter, `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a parameter, zeros when it was unreachable from the loss.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Which parameter coordinates [`finite_diff_check`] perturbs.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    Random { count: usize, seed: u64 },
    Coordinates(Vec<(ParamId, usize)>),
}

/// Maximum relative error between backward gradients and central differences.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(params: &mut ParamStore, eps: f64, probe: Probe, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(GradError::Invalid {
            op: "finite_diff_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let analytic: Vec<(ParamId, Tensor)> = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss)?;
        params.ids().map(|id| (id, grads.param_or_zeros(id, params))).collect()
    };

    let coords: Vec<(ParamId, usize)> = match probe {
        Probe::All => params
            .ids()
            .flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i)))
            .collect(),
        Probe::Random { count, seed } => {
            let total = params.scalar_count();
            if total == 0 {
                Vec::new()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sizes: Vec<usize> = params.ids().map(|id| params.get(id).len()).collect();
                (0..count)
                    .map(|_| {
                        let mut flat = rng.gen_range(0..total);
                        let mut p = 0;
                        while flat >= sizes[p] {
                            flat -= sizes[p];
                            p += 1;
                        }
                        (ParamId(p), flat)
                    })
                    .collect()
            }
        }
        Probe::Coordinates(c) => c,
    };

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0_f64;
    for (id, index) in coords {
        let original = params.get(id).data[index];
        params.get_mut(id).data[index] = original + eps;
        let plus = eval(params);
        params.get_mut(id).data[index] = original - eps;
        let minus = eval(params);
        params.get_mut(id).data[index] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradError::NonFinite {
                param: params.name(id).to_string(),
                index,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[id.0].1.data[index];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn square_value_and_gradient() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(ids[0]).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(-2.0));
        let y = g.relu(x);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn matrix_vector_product() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let x = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]));
        let y = g.matmul(w, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_the_operation() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::vector(vec![1.0]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_jacobian_at_origin() {
        // d softmax_i / d z_j = p_i (delta_ij - p_j) with p = 1/3.
        let store = ParamStore::new();
        for i in 0..3 {
            let mut g = Graph::new(&store);
            let z = g.input(Tensor::matrix(1, 3, vec![0.0; 3]));
            let p = g.softmax(z).unwrap();
            let pick = g.columns(p, i, i + 1).unwrap();
            let loss = g.sum(pick);
            let grads = g.backward(loss).unwrap();
            let row = grads.wrt(z).unwrap().data().to_vec();
            for (j, v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 / 3.0 - 1.0 / 9.0 } else { -1.0 / 9.0 };
                assert!((v - expected).abs() < 1e-15, "J[{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let (store, ids) = store_with(&[("w", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let _w = g.param(ids[0]);
        let c = g.constant(Tensor::scalar(5.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.param(ids[0]).is_none());
        assert_eq!(grads.param_or_zeros(ids[0], &store).data(), &[0.0, 0.0]);
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = exp(x) + x*x, dy/dx = exp(x) + 2x.
        let (store, ids) = store_with(&[("x", Tensor::scalar(0.7))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let a = g.exp(x);
        let b = g.mul(x, x).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        let expected = 0.7_f64.exp() + 1.4;
        assert!((grads.param(ids[0]).unwrap().item() - expected).abs() < 1e-14);
    }

    #[test]
    fn finite_diff_examples() {
        let (mut store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let id = ids[0];
        let err = finite_diff_check(&mut store, 1e-5, Probe::All, |g| {
            let x = g.param(id);
            g.mul(x, x)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");

        store.get_mut(id).data_mut()[0] = 1.0;
        let err = finite_diff_check(&mut store, 1e-5, Probe::All, |g| {
            let x = g.param(id);
            Ok(g.sin(x))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");

        let err = finite_diff_check(&mut store, 1e-5, Probe::All, |g| {
            let _ = g.param(id);
            Ok(g.constant(Tensor::scalar(0.0)))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_reports_non_finite_coordinate() {
        let (mut store, ids) = store_with(&[("x", Tensor::vector(vec![1.0, 700.0]))]);
        let id = ids[0];
        let err = finite_diff_check(&mut store, 1e-3, Probe::All, |g| {
            let x = g.param(id);
            let e = g.exp(x);
            let e2 = g.mul(e, e)?;
            Ok(g.sum(e2))
        })
        .unwrap_err();
        assert!(matches!(err, GradError::NonFinite { index: 0, .. } | GradError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]));
        let p = g.softmax_masked(z, Some(&[true, false, true])).unwrap();
        let v = g.value(p).data().to_vec();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scatter_accumulates_repeated_rows() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let y = g.scatter_rows(x, &[2, 0, 2], 4).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
        let err = finite_diff_check(&mut store, 1e-6, Probe::All, |g| {
            let x = g.param(id);
            let y = g.scatter_rows(x, &[2, 0, 2], 4)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
