//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Only what the model needs is here: matrix products, elementwise
//! arithmetic, the three activations, row gathering for SortPooling, and a
//! clamped binary cross-entropy. Broadcasting is limited to adding a `1 x n`
//! bias to every row.
//!
//! Parameters live in a [`ParamStore`] that a [`Tape`] borrows immutably, so
//! many tapes can run forward/backward against the same parameters in
//! parallel. Each backward pass accumulates into a caller-owned
//! [`Gradients`] buffer.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape { op: "tensor", left: shape, right: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        check_matmul(self, other)?;
        let mut out = Tensor::zeros(&[self.rows(), other.cols()]);
        matmul_acc(self, other, &mut out);
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<()> {
    if !a.is_matrix() || !b.is_matrix() || a.shape[1] != b.shape[0] {
        return Err(Error::Shape { op: "matmul", left: a.shape.clone(), right: b.shape.clone() });
    }
    Ok(())
}

/// `out += a * b`
///
/// The loop walks rows of `b` in the outer position so a large right-hand
/// side is streamed once per call rather than once per row of `a`. Every
/// output entry still sums its terms in increasing `p`.
#[inline(always)]
fn matmul_acc_body(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    for p in 0..k {
        let b_row = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_acc_avx2(a, b, out) };
    }
    matmul_acc_body(a, b, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    matmul_acc_body(a, b, out)
}

/// `out += g * b^T` where `g: m x n`, `b: k x n`, `out: m x k`.
#[inline(always)]
fn matmul_a_bt_acc_body(g: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (m, n, k) = (g.rows(), g.cols(), b.rows());
    for p in 0..k {
        let b_row = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            out.data[i * k + p] += dot(&g.data[i * n..(i + 1) * n], b_row);
        }
    }
}

fn matmul_a_bt_acc(g: &Tensor, b: &Tensor, out: &mut Tensor) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_a_bt_acc_avx2(g, b, out) };
    }
    matmul_a_bt_acc_body(g, b, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_a_bt_acc_avx2(g: &Tensor, b: &Tensor, out: &mut Tensor) {
    matmul_a_bt_acc_body(g, b, out)
}

/// Dot product with sixteen independent accumulators so the loop vectorizes
/// without a serial dependency on one sum.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 16;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// `out += a^T * g` where `a: m x k`, `g: m x n`, `out: k x n`.
#[inline(always)]
fn matmul_at_b_acc_body(a: &Tensor, g: &Tensor, out: &mut Tensor) {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    for p in 0..k {
        let out_row = &mut out.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out_row.iter_mut().zip(&g.data[i * n..(i + 1) * n]) {
                *o += av * gv;
            }
        }
    }
}

fn matmul_at_b_acc(a: &Tensor, g: &Tensor, out: &mut Tensor) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_at_b_acc_avx2(a, g, out) };
    }
    matmul_at_b_acc_body(a, g, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_at_b_acc_avx2(a: &Tensor, g: &Tensor, out: &mut Tensor) {
    matmul_at_b_acc_body(a, g, out)
}

/// Constant sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                if c >= cols {
                    return Err(Error::Contract(format!("column {c} out of {cols}")));
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { rows: rows.len(), cols, row_ptr, col_idx, values })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.data[r * self.cols + c] += v;
            }
        }
        t
    }

    /// `self * x` for a dense `x`.
    ///
    /// Each output entry sums its terms in ascending value order, so the
    /// result does not depend on how rows and columns were numbered.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() || x.rows() != self.cols {
            return Err(Error::Shape { op: "spmm", left: self.shape().to_vec(), right: x.shape().to_vec() });
        }
        let n = x.cols();
        let mut out = Tensor::zeros(&[self.rows, n]);
        let mut terms = Vec::new();
        for r in 0..self.rows {
            for j in 0..n {
                terms.clear();
                terms.extend(self.row(r).map(|(c, v)| v * x.data[c * n + j]));
                if terms.len() > 2 {
                    terms.sort_unstable_by(f64::total_cmp);
                }
                out.data[r * n + j] = terms.iter().sum();
            }
        }
        Ok(out)
    }

    /// `out += self^T * g`
    fn transpose_matmul_acc(&self, g: &Tensor, out: &mut Tensor) {
        let n = g.cols();
        for r in 0..self.rows {
            let g_row = &g.data[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                for (o, gv) in out.data[c * n..(c + 1) * n].iter_mut().zip(g_row) {
                    *o += v * gv;
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors. Insertion order is the canonical parameter order
/// used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Fresh zeroed gradient buffer shaped like this store.
    pub fn gradients(&self) -> Gradients {
        Gradients { grads: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    /// Adds a gradient buffer into every parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            p.grad.add_assign(g);
        }
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    SpMatMul(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64, shift: f64 },
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<Option<usize>> },
    ScaleRows { x: Var, s: Var },
    Reshape(Var),
    Sum(Var),
    Bce { p: Var, targets: Vec<f64>, eps: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Const | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::SpMatMul(_, x) | Op::Affine { x, .. } | Op::Act(x, _) | Op::GatherRows { x, .. } | Op::Reshape(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Bce { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    // `None` for parameters, whose values are read from the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    signature: u64,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), signature: 0xcbf2_9ce4_8422_2325 }
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
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params.get(*id).value,
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Hash of every discrete decision taken during the forward pass (relu
    /// signs, sort orders, clamping). Two evaluations with the same signature
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    /// Mixes a discrete decision into the branch signature.
    pub fn note_branch(&mut self, values: impl IntoIterator<Item = u64>) {
        for v in values {
            self.signature = (self.signature ^ v).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Const, shape, Some(t), false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).value.shape().to_vec();
        self.push(Op::Param(id), shape, None, true)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>, requires_grad: bool) -> Var {
        if let Some(v) = &value {
            debug_assert!(v.is_finite() || matches!(op, Op::Const), "non-finite output from {op:?}");
        }
        self.nodes.push(Node { op, shape, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        if let Op::Act(x, Activation::Relu) = op {
            let pattern: Vec<u64> = self.value(x).data().iter().map(|&v| u64::from(v > 0.0)).collect();
            self.note_branch(pattern);
        }
        let shape = value.shape().to_vec();
        Ok(self.push(op, shape, Some(value), requires_grad))
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        Ok(match op {
            Op::Const | Op::Param(_) => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => self.value(*a).matmul(self.value(*b))?,
            Op::SpMatMul(a, x) => a.matmul(self.value(*x))?,
            Op::Add(a, b) => {
                let (a, b) = (self.value(*a), self.value(*b));
                if a.shape() != b.shape() {
                    return Err(Error::Shape { op: "add", left: a.shape().to_vec(), right: b.shape().to_vec() });
                }
                zip_map(a, b, |x, y| x + y)
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.value(*a), self.value(*b));
                if a.shape() != b.shape() {
                    return Err(Error::Shape { op: "mul", left: a.shape().to_vec(), right: b.shape().to_vec() });
                }
                zip_map(a, b, |x, y| x * y)
            }
            Op::AddRowBias(x, b) => {
                let (x, b) = (self.value(*x), self.value(*b));
                if !x.is_matrix() || b.shape() != [1, x.cols()] {
                    return Err(Error::Shape { op: "add_row_bias", left: x.shape().to_vec(), right: b.shape().to_vec() });
                }
                let mut out = x.clone();
                let c = x.cols();
                for (i, v) in out.data.iter_mut().enumerate() {
                    *v += b.data[i % c];
                }
                out
            }
            Op::Affine { x, scale, shift } => map(self.value(*x), |v| scale * v + shift),
            Op::Act(x, kind) => {
                let x = self.value(*x);
                match kind {
                    Activation::Relu => map(x, |v| v.max(0.0)),
                    Activation::Sigmoid => map(x, sigmoid),
                    Activation::Tanh => map(x, f64::tanh),
                }
            }
            Op::ConcatCols(xs) => {
                let first = self.value(xs[0]);
                let rows = first.rows();
                for v in xs {
                    let t = self.value(*v);
                    if !t.is_matrix() || t.rows() != rows {
                        return Err(Error::Shape { op: "concat_cols", left: first.shape().to_vec(), right: t.shape().to_vec() });
                    }
                }
                let total: usize = xs.iter().map(|v| self.value(*v).cols()).sum();
                let mut out = Tensor::zeros(&[rows, total]);
                for r in 0..rows {
                    let mut off = r * total;
                    for v in xs {
                        let row = self.value(*v).row(r);
                        out.data[off..off + row.len()].copy_from_slice(row);
                        off += row.len();
                    }
                }
                out
            }
            Op::ConcatRows(xs) => {
                let first = self.value(xs[0]);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for v in xs {
                    let t = self.value(*v);
                    if !t.is_matrix() || t.cols() != cols {
                        return Err(Error::Shape { op: "concat_rows", left: first.shape().to_vec(), right: t.shape().to_vec() });
                    }
                    data.extend_from_slice(&t.data);
                    rows += t.rows();
                }
                Tensor { shape: vec![rows, cols], data }
            }
            Op::GatherRows { x, rows } => {
                let x = self.value(*x);
                let c = x.cols();
                let mut out = Tensor::zeros(&[rows.len(), c]);
                for (r, src) in rows.iter().enumerate() {
                    if let Some(s) = *src {
                        if s >= x.rows() {
                            return Err(Error::Contract(format!("gather row {s} out of {}", x.rows())));
                        }
                        out.data[r * c..(r + 1) * c].copy_from_slice(x.row(s));
                    }
                }
                out
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (self.value(*x), self.value(*s));
                if s.shape() != [x.rows(), 1] {
                    return Err(Error::Shape { op: "scale_rows", left: x.shape().to_vec(), right: s.shape().to_vec() });
                }
                let c = x.cols();
                let mut out = x.clone();
                for (i, v) in out.data.iter_mut().enumerate() {
                    *v *= s.data[i / c];
                }
                out
            }
            Op::Reshape(x) => unreachable!("reshape computed in place: {x:?}"),
            Op::Sum(x) => Tensor::scalar(self.value(*x).sum()),
            Op::Bce { p, targets, eps } => {
                let p = self.value(*p);
                if p.len() != targets.len() {
                    return Err(Error::Shape { op: "bce", left: p.shape().to_vec(), right: vec![targets.len(), 1] });
                }
                let total = p
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&raw, &y)| {
                        let c = raw.clamp(*eps, 1.0 - eps);
                        -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
                    })
                    .sum();
                Tensor::scalar(total)
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Product of a constant sparse matrix with `x`.
    pub fn sparse_matmul(&mut self, a: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        self.record(Op::SpMatMul(a, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRowBias(x, bias))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.record(Op::Affine { x, scale, shift })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.record(Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        self.record(Op::ConcatCols(xs.to_vec()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        self.record(Op::ConcatRows(xs.to_vec()))
    }

    /// Output row `r` is `x[rows[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        self.record(Op::GatherRows { x, rows })
    }

    /// Multiplies row `i` of `x` by `s[i]` (`s: n x 1`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleRows { x, s })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape { op: "reshape", left: src.shape().to_vec(), right: shape.to_vec() });
        }
        let value = Tensor { shape: shape.to_vec(), data: src.data.clone() };
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape(x), shape.to_vec(), Some(value), requires_grad))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    /// Binary cross-entropy of a probability against a 0/1 target, with the
    /// probability clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: f64, eps: f64) -> Result<Var> {
        self.bce_sum(p, vec![target], eps)
    }

    /// Summed binary cross-entropy of every entry of `p` against `targets`.
    pub fn bce_sum(&mut self, p: Var, targets: Vec<f64>, eps: f64) -> Result<Var> {
        let pattern: Vec<u64> = self.value(p).data().iter().map(|&raw| u64::from(raw < eps) | u64::from(raw > 1.0 - eps) << 1).collect();
        self.note_branch(pattern);
        self.record(Op::Bce { p, targets, eps })
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all values are reproduced bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|node| match &node.op {
            Op::Const | Op::Param(_) => true,
            Op::Reshape(x) => node.value.as_ref().map(|v| v.data()) == Some(self.value(*x).data()),
            op => match (self.compute(op), &node.value) {
                (Ok(t), Some(v)) => t.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()),
                _ => false,
            },
        })
    }

    /// Accumulates d`loss`/d`theta` into `grads` for every parameter on the tape.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        self.backward_scaled(loss, 1.0, grads)
    }

    /// Like [`Self::backward`] with the seed gradient set to `scale`
    /// (e.g. `1 / batch_size` for a mean loss).
    pub fn backward_scaled(&self, loss: Var, scale: f64, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::filled(self.shape(loss), scale));

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    if let Some(slot) = self.slot(*a, &mut node_grads, grads) {
                        matmul_a_bt_acc(&g, self.value(*b), slot);
                    }
                    if let Some(slot) = self.slot(*b, &mut node_grads, grads) {
                        matmul_at_b_acc(self.value(*a), &g, slot);
                    }
                }
                Op::SpMatMul(a, x) => {
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        a.transpose_matmul_acc(&g, slot);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(slot) = self.slot(v, &mut node_grads, grads) {
                            slot.add_assign(&g);
                        }
                    }
                }
                Op::AddRowBias(x, b) => {
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        slot.add_assign(&g);
                    }
                    if let Some(slot) = self.slot(*b, &mut node_grads, grads) {
                        let c = g.cols();
                        for (k, v) in g.data.iter().enumerate() {
                            slot.data[k % c] += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(slot) = self.slot(*a, &mut node_grads, grads) {
                        for ((s, gv), y) in slot.data.iter_mut().zip(&g.data).zip(&bv.data) {
                            *s += gv * y;
                        }
                    }
                    if let Some(slot) = self.slot(*b, &mut node_grads, grads) {
                        for ((s, gv), x) in slot.data.iter_mut().zip(&g.data).zip(&av.data) {
                            *s += gv * x;
                        }
                    }
                }
                Op::Affine { x, scale, .. } => {
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        for (s, gv) in slot.data.iter_mut().zip(&g.data) {
                            *s += scale * gv;
                        }
                    }
                }
                Op::Act(x, kind) => {
                    let input = self.value(*x);
                    let out = node.value.as_ref().expect("activation value");
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        for (k, s) in slot.data.iter_mut().enumerate() {
                            let d = match kind {
                                Activation::Relu => {
                                    if input.data[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Sigmoid => out.data[k] * (1.0 - out.data[k]),
                                Activation::Tanh => 1.0 - out.data[k] * out.data[k],
                            };
                            *s += g.data[k] * d;
                        }
                    }
                }
                Op::ConcatCols(xs) => {
                    let total = g.cols();
                    let mut off = 0;
                    for v in xs {
                        let c = self.value(*v).cols();
                        if let Some(slot) = self.slot(*v, &mut node_grads, grads) {
                            for r in 0..g.rows() {
                                let src = &g.data[r * total + off..r * total + off + c];
                                for (s, gv) in slot.data[r * c..(r + 1) * c].iter_mut().zip(src) {
                                    *s += gv;
                                }
                            }
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for v in xs {
                        let len = self.value(*v).len();
                        if let Some(slot) = self.slot(*v, &mut node_grads, grads) {
                            for (s, gv) in slot.data.iter_mut().zip(&g.data[off..off + len]) {
                                *s += gv;
                            }
                        }
                        off += len;
                    }
                }
                Op::GatherRows { x, rows } => {
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        let c = g.cols();
                        for (r, src) in rows.iter().enumerate() {
                            if let Some(s) = *src {
                                for (d, gv) in slot.data[s * c..(s + 1) * c].iter_mut().zip(&g.data[r * c..(r + 1) * c]) {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                Op::ScaleRows { x, s } => {
                    let c = g.cols();
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        for (k, d) in slot.data.iter_mut().enumerate() {
                            *d += g.data[k] * sv.data[k / c];
                        }
                    }
                    if let Some(slot) = self.slot(*s, &mut node_grads, grads) {
                        for (k, (gv, xv)) in g.data.iter().zip(&xv.data).enumerate() {
                            slot.data[k / c] += gv * xv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        for (s, gv) in slot.data.iter_mut().zip(&g.data) {
                            *s += gv;
                        }
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data[0];
                    if let Some(slot) = self.slot(*x, &mut node_grads, grads) {
                        slot.data.iter_mut().for_each(|s| *s += gv);
                    }
                }
                Op::Bce { p, targets, eps } => {
                    let pv = self.value(*p);
                    if let Some(slot) = self.slot(*p, &mut node_grads, grads) {
                        for ((s, &raw), &y) in slot.data.iter_mut().zip(&pv.data).zip(targets) {
                            if raw > *eps && raw < 1.0 - eps {
                                *s += g.data[0] * (-y / raw + (1.0 - y) / (1.0 - raw));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulator for `v`: the shared parameter buffer for
    /// parameters, a lazily created per-node buffer otherwise.
    fn slot<'a>(
        &self,
        v: Var,
        node_grads: &'a mut [Option<Tensor>],
        grads: &'a mut Gradients,
    ) -> Option<&'a mut Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match node.op {
            Op::Param(id) => Some(&mut grads.grads[id.0]),
            _ => Some(node_grads[v.0].get_or_insert_with(|| Tensor::zeros(&node.shape))),
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

/// Result of comparing autodiff gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point
    /// (relu kink, sort-order change, clamp boundary) and were not compared.
    pub skipped: usize,
}

/// Compares the autodiff gradient of `f` with respect to `param` against
/// central differences `(f(θ+εe) − f(θ−εe)) / 2ε`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// `coords` restricts the check to a subset of flat indices. Coordinates
/// where either perturbed evaluation takes a different branch than the
/// unperturbed one are skipped.
pub fn finite_difference_check<F>(
    params: &mut ParamStore,
    param: ParamId,
    eps: f64,
    coords: Option<&[usize]>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let (analytic, base_sig) = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        let mut grads = params.gradients();
        tape.backward(loss, &mut grads)?;
        (grads.get(param).clone(), tape.branch_signature())
    };

    let eval = |params: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        Ok((tape.value(loss).data()[0], tape.branch_signature()))
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..analytic.len()).collect();
            &all
        }
    };

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for &k in coords {
        let orig = params.get(param).value.data()[k];
        params.get_mut(param).value.data_mut()[k] = orig + eps;
        let (plus, sig_plus) = eval(params)?;
        params.get_mut(param).value.data_mut()[k] = orig - eps;
        let (minus, sig_minus) = eval(params)?;
        params.get_mut(param).value.data_mut()[k] = orig;

        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[k];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}
