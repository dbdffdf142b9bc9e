//! Tape-based reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended after
//! their operands, so walking the tape backwards from the loss is a reverse
//! topological order and each node is visited exactly once.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Probability floor applied before any logarithm in the loss code.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    /// n×c plus a 1×c row broadcast over rows.
    AddRow(Var, Var),
    /// n×c times a 1×c row broadcast over rows.
    MulRow(Var, Var),
    /// n×c times an n×1 column broadcast over columns.
    MulCol(Var, Var),
    /// n×c times a 1×1 node.
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ConcatCols(Var, Var),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn parameter(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = match op {
            BinaryOp::Add => va.zip_map(vb, |x, y| x + y),
            BinaryOp::Sub => va.zip_map(vb, |x, y| x - y),
            BinaryOp::Mul => va.zip_map(vb, |x, y| x * y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        let value = match op {
            UnaryOp::Relu => va.map(|x| x.max(0.0)),
            UnaryOp::Sigmoid => va.map(sigmoid),
            UnaryOp::Exp => va.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = va.as_slice().iter().find(|&&x| !(x > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                va.map(f64::ln)
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(
                "add_row",
                format!("{n}x{c} plus {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..n {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(
                "mul_row",
                format!("{n}x{c} times {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..n {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if self.shape(col) != (n, 1) {
            return Err(Error::dim(
                "mul_col",
                format!("{n}x{c} times {:?}", self.shape(col)),
            ));
        }
        let s = self.value(col).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for (i, &si) in s.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= si;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim(
                "scale_by",
                format!("scale node has shape {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let va = self.value(a);
        if p.fract() != 0.0 || p < 0.0 {
            if let Some(bad) = va.as_slice().iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "powf",
                    detail: format!("{bad}^{p}"),
                });
            }
        }
        let value = va.map(|x| x.powf(p));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Powf(a, p), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// n×c → n×1 sums across each row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = DenseMatrix::column((0..va.rows()).map(|i| va.row(i).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// n×c → 1×c column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c) = va.shape();
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / n.max(1) as f64;
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(a);
        self.push(DenseMatrix::row_vector(out), Op::MeanRows(a), rg)
    }

    /// Output row k is input row `indices[k]`.
    pub fn gather_rows(&mut self, a: Var, indices: Rc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of {} rows", va.rows()),
            ));
        }
        let value = va.select_rows(&indices);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, indices), rg))
    }

    /// Output row `indices[k]` accumulates input row k; result has `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, indices: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let va = self.value(a);
        if indices.len() != va.rows() {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("{} indices for {} rows", indices.len(), va.rows()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_out) {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("target {bad} out of {n_out} rows"),
            ));
        }
        let mut value = DenseMatrix::zeros(n_out, va.cols());
        for (k, &dst) in indices.iter().enumerate() {
            for (o, v) in value.row_mut(dst).iter_mut().zip(va.row(k)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScatterAdd(a, indices), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hstack(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let mut acc = |v: Var, contrib: DenseMatrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul_t(vb)?);
                }
                if self.rg(*b) {
                    acc(*b, va.t_matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                BinaryOp::Sub => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                BinaryOp::Mul => {
                    if self.rg(*a) {
                        acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.rg(*b) {
                        acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
            },
            Op::Unary(op, a) => {
                let contrib = match op {
                    UnaryOp::Relu => g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
                    UnaryOp::Sigmoid => g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y)),
                    UnaryOp::Exp => g.zip_map(&node.value, |gi, y| gi * y),
                    UnaryOp::Log => g.zip_map(self.value(*a), |gi, x| gi / x),
                };
                acc(*a, contrib);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let (n, c) = va.shape();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..n {
                        for (x, r) in ga.row_mut(i).iter_mut().zip(vr.as_slice()) {
                            *x *= r;
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*row) {
                    let mut gr = vec![0.0; c];
                    for i in 0..n {
                        for ((o, gi), ai) in gr.iter_mut().zip(g.row(i)).zip(va.row(i)) {
                            *o += gi * ai;
                        }
                    }
                    acc(*row, DenseMatrix::row_vector(gr));
                }
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                let n = va.rows();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..n {
                        let s = vc.as_slice()[i];
                        for x in ga.row_mut(i) {
                            *x *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*col) {
                    let gc = (0..n)
                        .map(|i| g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*col, DenseMatrix::column(gc));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                if self.rg(*a) {
                    acc(*a, g.map(|x| x * k));
                }
                if self.rg(*s) {
                    let dot: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(*s, DenseMatrix::scalar(dot));
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Powf(a, p) => {
                let p = *p;
                acc(*a, g.zip_map(self.value(*a), |gi, x| gi * p * x.powf(p - 1.0)));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    g.zip_map(self.value(*a), |gi, x| if x >= lo && x <= hi { gi } else { 0.0 }),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(x, p)| x * p).sum();
                    for ((o, gi), p) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = p * (gi - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, DenseMatrix::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.as_slice()[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                acc(*a, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / r.max(1) as f64;
                let mut ga = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    for (o, gi) in ga.row_mut(i).iter_mut().zip(g.as_slice()) {
                        *o = gi * inv;
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(a, indices) => {
                let (r, c) = self.shape(*a);
                let mut ga = DenseMatrix::zeros(r, c);
                for (k, &src) in indices.iter().enumerate() {
                    for (o, gi) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += gi;
                    }
                }
                acc(*a, ga);
            }
            Op::ScatterAdd(a, indices) => acc(*a, g.select_rows(indices)),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let (n, c) = g.shape();
                let mut ga = DenseMatrix::zeros(n, ca);
                let mut gb = DenseMatrix::zeros(n, c - ca);
                for i in 0..n {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like it if nothing reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> DenseMatrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            DenseMatrix::zeros(r, c)
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn column_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    DenseMatrix::row_vector(out)
}
