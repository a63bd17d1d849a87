//! Dense row-major `f64` arrays and a tape-based reverse-mode differentiator.
//!
//! A [`Tensor`] is a plain value. To differentiate, register tensors on a
//! [`Tape`] (as parameters or constants) and combine the resulting [`Var`]
//! handles; every operation is appended to the tape in execution order, so a
//! reverse sweep over the tape is a valid topological replay.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a `rows x cols` matrix; panics if `data` has the wrong length.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::contract("from_rows needs at least one row"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![c],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Plain matrix product with no gradient recording.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor::matrix(n, m, gemm(&self.data, &other.data, n, k, m)))
    }

    /// Rows rescaled to unit Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let c = self.cols();
        let mut out = self.data.clone();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::domain("normalize_rows", format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Rows divided by `max(norm, floor)`; all-zero rows stay zero.
    pub fn normalize_rows_floored(&self, floor: f64) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = norm.max(floor);
            if d > 0.0 {
                row.iter_mut().for_each(|x| *x /= d);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(index.len(), c, data)
    }
}

/// `n x k` times `k x m`, row-major, i-k-j loop order.
fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(m)) {
            if a_ik == 0.0 {
                continue;
            }
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    out
}

/// `a (n x k)` times `b^T` where `b` is `m x k`.
fn gemm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T b` where `a` is `n x k` and `b` is `n x m`; result is `k x m`.
fn gemm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * m..(r + 1) * m];
        for (&a_ri, out_row) in a_row.iter().zip(out.chunks_exact_mut(m)) {
            if a_ri == 0.0 {
                continue;
            }
            for (o, &b_rj) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * b_rj;
            }
        }
    }
    out
}

/// Pointwise operations selectable at run time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Neg,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SoftmaxRows(usize, f64),
    LogSoftmaxRows(usize, f64),
    /// Per-row divisor, and whether the row was floored (divided by a
    /// constant rather than its own norm).
    NormalizeRows(usize, Vec<(f64, bool)>),
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Records operations for one reverse sweep. Not `Sync`: a tape belongs to a
/// single thread, but independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    /// Reverse sweep from a scalar loss. Every tracked node gets a gradient
    /// of its own shape (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Err(Error::contract("backward on a loss that depends on no parameter"));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            out.push(if node.tracked {
                Some(
                    grads
                        .get_mut(id)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                )
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        Tensor {
            shape: target.shape.clone(),
            data: g.data,
        }
    } else {
        Tensor {
            shape: target.shape.clone(),
            data: vec![g.sum()],
        }
    }
}

/// Operand values for a binary op, broadcast to `len`.
fn broadcast_at(t: &Tensor, i: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let tracked = |i: usize| nodes[i].tracked;
    let like = |t: &Tensor, data: Vec<f64>| Tensor {
        shape: t.shape.clone(),
        data,
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if tracked(*a) {
                accumulate(grads, *a, unbroadcast(g.clone(), val(*a)));
            }
            if tracked(*b) {
                accumulate(grads, *b, unbroadcast(g.map(|x| sign * x), val(*b)));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if tracked(*a) {
                let d = (0..g.len()).map(|i| g.data[i] * broadcast_at(bv, i)).collect();
                accumulate(grads, *a, unbroadcast(like(g, d), av));
            }
            if tracked(*b) {
                let d = (0..g.len()).map(|i| g.data[i] * broadcast_at(av, i)).collect();
                accumulate(grads, *b, unbroadcast(like(g, d), bv));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if tracked(*a) {
                let d = (0..g.len()).map(|i| g.data[i] / broadcast_at(bv, i)).collect();
                accumulate(grads, *a, unbroadcast(like(g, d), av));
            }
            if tracked(*b) {
                let d = (0..g.len())
                    .map(|i| {
                        let den = broadcast_at(bv, i);
                        -g.data[i] * broadcast_at(av, i) / (den * den)
                    })
                    .collect();
                accumulate(grads, *b, unbroadcast(like(g, d), bv));
            }
        }
        Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
        Op::Exp(a) => {
            let d = g.data.iter().zip(&out.data).map(|(g, y)| g * y).collect();
            accumulate(grads, *a, like(g, d));
        }
        Op::Log(a) => {
            let d = g.data.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect();
            accumulate(grads, *a, like(g, d));
        }
        Op::Relu(a) => {
            let d = g
                .data
                .iter()
                .zip(&val(*a).data)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, *a, like(g, d));
        }
        Op::Sigmoid(a) => {
            let d = g
                .data
                .iter()
                .zip(&out.data)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(grads, *a, like(g, d));
        }
        Op::Clamp(a, lo, hi) => {
            let d = g
                .data
                .iter()
                .zip(&val(*a).data)
                .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, *a, like(g, d));
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
        Op::Shift(a) => accumulate(grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
            if tracked(*a) {
                let d = gemm_nt(&g.data, &bv.data, n, m, k);
                accumulate(grads, *a, Tensor::matrix(n, k, d));
            }
            if tracked(*b) {
                let d = gemm_tn(&av.data, &g.data, n, k, m);
                accumulate(grads, *b, Tensor::matrix(k, m, d));
            }
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::AddRow(a, row) => {
            if tracked(*a) {
                accumulate(grads, *a, g.clone());
            }
            if tracked(*row) {
                let c = g.cols();
                let mut d = vec![0.0; c];
                for r in g.data.chunks_exact(c) {
                    for (acc, x) in d.iter_mut().zip(r) {
                        *acc += x;
                    }
                }
                accumulate(grads, *row, like(val(*row), d));
            }
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(grads, *a, val(*a).map(|_| gv));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let gv = g.item() / av.len() as f64;
            accumulate(grads, *a, av.map(|_| gv));
        }
        Op::SumRows(a) => {
            let av = val(*a);
            let c = av.cols();
            let d = (0..av.len()).map(|i| g.data[i / c]).collect();
            accumulate(grads, *a, like(av, d));
        }
        Op::SoftmaxRows(a, temp) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for ((s, gr), dr) in out
                .data
                .chunks_exact(c)
                .zip(g.data.chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
            {
                let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                for j in 0..c {
                    dr[j] = s[j] * (gr[j] - dot) / temp;
                }
            }
            accumulate(grads, *a, like(out, d));
        }
        Op::LogSoftmaxRows(a, temp) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for ((l, gr), dr) in out
                .data
                .chunks_exact(c)
                .zip(g.data.chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
            {
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    dr[j] = (gr[j] - l[j].exp() * total) / temp;
                }
            }
            accumulate(grads, *a, like(out, d));
        }
        Op::NormalizeRows(a, norms) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for (((y, gr), dr), norm) in out
                .data
                .chunks_exact(c)
                .zip(g.data.chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
                .zip(norms)
            {
                let &(norm, floored) = norm;
                if floored {
                    if norm > 0.0 {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d = g / norm);
                    }
                    continue;
                }
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    dr[j] = (gr[j] - y[j] * dot) / norm;
                }
            }
            accumulate(grads, *a, like(out, d));
        }
        Op::ConcatCols(a, b) => {
            let (ca, cb) = (val(*a).cols(), val(*b).cols());
            let rows = out.rows();
            if tracked(*a) {
                let mut d = Vec::with_capacity(rows * ca);
                for r in g.data.chunks_exact(ca + cb) {
                    d.extend_from_slice(&r[..ca]);
                }
                accumulate(grads, *a, like(val(*a), d));
            }
            if tracked(*b) {
                let mut d = Vec::with_capacity(rows * cb);
                for r in g.data.chunks_exact(ca + cb) {
                    d.extend_from_slice(&r[ca..]);
                }
                accumulate(grads, *b, like(val(*b), d));
            }
        }
        Op::GatherRows(a, index) => {
            let av = val(*a);
            let c = av.cols();
            let mut d = vec![0.0; av.len()];
            for (r, &src) in index.iter().enumerate() {
                for j in 0..c {
                    d[src * c + j] += g.data[r * c + j];
                }
            }
            accumulate(grads, *a, like(av, d));
        }
        Op::PickPerRow(a, cols) => {
            let av = val(*a);
            let c = av.cols();
            let mut d = vec![0.0; av.len()];
            for (r, &j) in cols.iter().enumerate() {
                d[r * c + j] = g.data[r];
            }
            accumulate(grads, *a, like(av, d));
        }
    }
}

/// Result of a reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked variable; `None` for constants.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Number of variables that received a gradient.
    pub fn tracked_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape || b.is_scalar() {
        Ok(a.shape.clone())
    } else if a.is_scalar() {
        Ok(b.shape.clone())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data = (0..n).map(|i| f(broadcast_at(a, i), broadcast_at(b, i))).collect();
    Tensor { shape, data }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    /// Whether gradients flow into this variable.
    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Same value, re-registered as a constant (stop-gradient).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn check_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn elementwise(&self, op: Elementwise, other: Option<Var<'t>>) -> Result<Var<'t>> {
        match (op.is_binary(), other) {
            (true, Some(b)) => match op {
                Elementwise::Add => self.add(b),
                Elementwise::Sub => self.sub(b),
                Elementwise::Mul => self.mul(b),
                Elementwise::Div => self.div(b),
                _ => unreachable!(),
            },
            (false, None) => match op {
                Elementwise::Exp => Ok(self.exp()),
                Elementwise::Log => self.log(),
                Elementwise::Relu => Ok(self.relu()),
                Elementwise::Neg => Ok(self.neg()),
                _ => unreachable!(),
            },
            (true, None) => Err(Error::contract(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::contract(format!("{op:?} takes one operand"))),
        }
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = same_or_scalar("add", &a, &b)?;
        let v = zip_broadcast(&a, &b, shape, |x, y| x + y);
        Ok(self.tape.binary(self.id, other.id, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = same_or_scalar("sub", &a, &b)?;
        let v = zip_broadcast(&a, &b, shape, |x, y| x - y);
        Ok(self.tape.binary(self.id, other.id, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = same_or_scalar("mul", &a, &b)?;
        let v = zip_broadcast(&a, &b, shape, |x, y| x * y);
        Ok(self.tape.binary(self.id, other.id, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = same_or_scalar("div", &a, &b)?;
        if let Some(i) = b.data.iter().position(|&x| x == 0.0) {
            return Err(Error::domain("div", format!("zero divisor at flat index {i}")));
        }
        let v = zip_broadcast(&a, &b, shape, |x, y| x / y);
        Ok(self.tape.binary(self.id, other.id, v, Op::Div(self.id, other.id)))
    }

    pub fn neg(&self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.tape.unary(self.id, v, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.unary(self.id, v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(i) = a.data.iter().position(|&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain(
                "log",
                format!("non-positive input {} at flat index {i}", a.data[i]),
            ));
        }
        let v = a.map(f64::ln);
        Ok(self.tape.unary(self.id, v, Op::Log(self.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.unary(self.id, v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.unary(self.id, v, Op::Sigmoid(self.id))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.tape.unary(self.id, v, Op::Clamp(self.id, lo, hi))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.tape.unary(self.id, v, Op::Scale(self.id, c))
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.unary(self.id, v, Op::Shift(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.binary(self.id, other.id, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: a.shape.clone(),
                right: vec![],
            });
        }
        let v = a.transpose();
        Ok(self.tape.unary(self.id, v, Op::Transpose(self.id)))
    }

    /// Adds a length-`m` row vector to every row of an `n x m` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&row);
        let (a, r) = (self.value(), row.value());
        if a.shape.len() != 2 || r.len() != a.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: a.shape.clone(),
                right: r.shape.clone(),
            });
        }
        let c = a.cols();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + r.data[i % c])
            .collect();
        let v = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.tape.binary(self.id, row.id, v, Op::AddRow(self.id, row.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.unary(self.id, v, Op::Sum(self.id))
    }

    /// Mean of all entries. The reduction runs over the sorted values, so
    /// the result is independent of the order of the entries.
    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let mut sorted = a.data.clone();
        sorted.sort_by(f64::total_cmp);
        let v = Tensor::scalar(sorted.iter().sum::<f64>() / sorted.len() as f64);
        self.tape.unary(self.id, v, Op::Mean(self.id))
    }

    /// Per-row sums of an `n x m` matrix, shape `[n, 1]`.
    pub fn sum_rows(&self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let data: Vec<f64> = a.data.chunks_exact(c).map(|r| r.iter().sum()).collect();
        let v = Tensor::matrix(data.len(), 1, data);
        self.tape.unary(self.id, v, Op::SumRows(self.id))
    }

    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let a = self.value();
        let v = softmax_rows_value(&a, temperature);
        Ok(self.tape.unary(self.id, v, Op::SoftmaxRows(self.id, temperature)))
    }

    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(a.len());
        for row in a.data.chunks_exact(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| ((x - max) / temperature).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| (x - max) / temperature - lse));
        }
        let v = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self
            .tape
            .unary(self.id, v, Op::LogSoftmaxRows(self.id, temperature)))
    }

    /// Rows divided by their Euclidean norms.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        if let Some(i) = row_norms(&self.value()).iter().position(|&n| n == 0.0) {
            return Err(Error::domain("normalize_rows", format!("row {i} has zero norm")));
        }
        Ok(self.normalize_rows_floored(0.0))
    }

    /// Rows divided by `max(norm, floor)`. Rows shorter than `floor` are
    /// scaled linearly, so an all-zero row stays zero.
    pub fn normalize_rows_floored(&self, floor: f64) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let divisors: Vec<(f64, bool)> = row_norms(&a)
            .into_iter()
            .map(|n| if n < floor || n == 0.0 { (floor, true) } else { (n, false) })
            .collect();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let (d, _) = divisors[i / c];
                if d == 0.0 { 0.0 } else { x / d }
            })
            .collect();
        let v = Tensor {
            shape: a.shape.clone(),
            data,
        };
        self.tape.unary(self.id, v, Op::NormalizeRows(self.id, divisors))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rows() != b.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let v = Tensor::matrix(a.rows(), ca + cb, data);
        Ok(self
            .tape
            .binary(self.id, other.id, v, Op::ConcatCols(self.id, other.id)))
    }

    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= a.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                a.rows()
            )));
        }
        let v = a.gather_rows(index);
        Ok(self
            .tape
            .unary(self.id, v, Op::GatherRows(self.id, index.to_vec())))
    }

    /// Entry `(r, cols[r])` of every row, as a length-`n` vector.
    pub fn pick_per_row(&self, cols: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let c = a.cols();
        if cols.len() != a.rows() {
            return Err(Error::Shape {
                op: "pick_per_row",
                left: a.shape.clone(),
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::contract(format!("column {bad} out of range for {c} columns")));
        }
        let data = cols.iter().enumerate().map(|(r, &j)| a.data[r * c + j]).collect();
        let v = Tensor::vector(data);
        Ok(self
            .tape
            .unary(self.id, v, Op::PickPerRow(self.id, cols.to_vec())))
    }
}

fn row_norms(a: &Tensor) -> Vec<f64> {
    a.data
        .chunks_exact(a.cols())
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("softmax", format!("temperature must be positive, got {t}")))
    }
}

fn softmax_rows_value(a: &Tensor, temperature: f64) -> Tensor {
    let c = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for row in a.data.chunks_exact(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|x| ((x - max) / temperature).exp()));
        let total: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|x| *x /= total);
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Row-wise softmax of `z / temperature`, stabilized by subtracting each
/// row's maximum.
pub fn softmax_rows(z: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    Ok(softmax_rows_value(z, temperature))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}
