//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order, so parents always
//! precede their children and a single reverse sweep visits each node once.
//! Leaves are either trainable parameters or constants; gradients are only
//! propagated along paths that reach a parameter.
//!
//! ```
//! use semst::tensor::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[1.0, -2.0]]).unwrap());
//! let y = tape.relu(w).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 0.0]);
//! ```

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::matrix::{gemm, Csr, Matrix};
use super::special::{digamma, ln_gamma};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    SpMM(Arc<Csr>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Lgamma(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowL2Normalize(Var, Vec<f64>),
    SoftmaxRows(Var),
    PairDots(Var, Arc<Vec<(usize, usize)>>),
    ZinbNll {
        mu: Var,
        theta: Var,
        pi: Var,
        target: Arc<Matrix>,
        logits: bool,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: bool,
}

/// Gradients of a scalar with respect to the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// A single-owner computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::filled(1, 1, value))
    }

    fn push_leaf(&mut self, value: Matrix, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: param,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Sparse-times-dense product with a constant sparse operand.
    pub fn spmm(&mut self, sparse: &Arc<Csr>, b: Var) -> Result<Var> {
        let value = sparse.matmul_dense(self.value(b))?;
        self.push("spmm", value, Op::SpMM(Arc::clone(sparse), b), &[b])
    }

    /// Elementwise sum. `b` may also be a `1×cols` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise difference, with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    fn broadcast_binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Matrix::from_vec(va.rows(), va.cols(), data);
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let row = vb.row(0);
            return Ok(Matrix::from_fn(va.rows(), va.cols(), |i, j| f(va.get(i, j), row[j])));
        }
        Err(Error::shape(op, va.shape(), vb.shape()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data)?;
        self.push("elementwise_mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape("concat_cols", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let value = Matrix::from_fn(va.rows(), ca + cb, |i, j| {
            if j < ca {
                va.get(i, j)
            } else {
                vb.get(i, j - ca)
            }
        });
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::InvalidArgument(format!(
                "split_cols: column range {start}..{end} outside width {}",
                va.cols()
            )));
        }
        let value = Matrix::from_fn(va.rows(), end - start, |i, j| va.get(i, start + j));
        self.push("split_cols", value, Op::SliceCols(a, start), &[a])
    }

    /// Splits `a` at column `at` into `(left, right)`.
    pub fn split_cols(&mut self, a: Var, at: usize) -> Result<(Var, Var)> {
        let cols = self.shape(a).1;
        Ok((self.slice_cols(a, 0, at)?, self.slice_cols(a, at, cols)?))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check_positive("log", a)?;
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.check_positive("lgamma", a)?;
        self.unary("lgamma", a, ln_gamma, Op::Lgamma(a))
    }

    fn check_positive(&self, op: &'static str, a: Var) -> Result<()> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op,
                detail: format!("argument {bad} is not positive"),
            });
        }
        Ok(())
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.data().len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let value = Matrix::filled(1, 1, v.sum() / n as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Scales every row to unit Euclidean norm. Zero rows are a domain error.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut norms = Vec::with_capacity(va.rows());
        let mut value = va.clone();
        for i in 0..va.rows() {
            let norm = va.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "row_l2_normalize",
                    detail: format!("row {i} has zero norm"),
                });
            }
            for x in value.row_mut(i) {
                *x /= norm;
            }
            norms.push(norm);
        }
        self.push("row_l2_normalize", value, Op::RowL2Normalize(a, norms), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Dot products `a[i]·a[j]` for each listed row pair, as a `P×1` column.
    pub fn pair_dots(&mut self, a: Var, pairs: &Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= va.rows() || j >= va.rows() {
                return Err(Error::InvalidArgument(format!(
                    "pair_dots: pair ({i}, {j}) outside {} rows",
                    va.rows()
                )));
            }
            data.push(dot(va.row(i), va.row(j)));
        }
        let value = Matrix::from_vec(pairs.len(), 1, data)?;
        self.push("pair_dots", value, Op::PairDots(a, Arc::clone(pairs)), &[a])
    }

    /// Summed zero-inflated negative binomial negative log-likelihood of
    /// `target` under elementwise parameters `(mu, theta, pi)`.
    pub fn zinb_nll(&mut self, mu: Var, theta: Var, pi: Var, target: &Arc<Matrix>) -> Result<Var> {
        self.zinb_op(mu, theta, pi, target, false)
    }

    /// As [`Tape::zinb_nll`] with the mean given as `ln μ` and the dropout
    /// probability as its logit. Stays finite where `exp` underflows or the
    /// sigmoid saturates.
    pub fn zinb_nll_logits(&mut self, log_mu: Var, theta: Var, pi_logit: Var, target: &Arc<Matrix>) -> Result<Var> {
        self.zinb_op(log_mu, theta, pi_logit, target, true)
    }

    fn zinb_op(&mut self, mu: Var, theta: Var, pi: Var, target: &Arc<Matrix>, logits: bool) -> Result<Var> {
        self.same_shape("zinb_nll", mu, theta)?;
        self.same_shape("zinb_nll", mu, pi)?;
        let shape = self.shape(mu);
        if target.shape() != shape {
            return Err(Error::shape("zinb_nll", target.shape(), shape));
        }
        let entry = if logits { zinb_entry_logits } else { zinb_entry };
        let (vm, vt, vp) = (self.value(mu), self.value(theta), self.value(pi));
        let cols = shape.1;
        let mut total = 0.0;
        for (idx, &x) in target.data().iter().enumerate() {
            let lp = entry(x, vm.data()[idx], vt.data()[idx], vp.data()[idx]).log_prob;
            if !lp.is_finite() {
                return Err(Error::NonFiniteEntry {
                    op: "zinb_nll",
                    row: idx / cols,
                    col: idx % cols,
                });
            }
            total -= lp;
        }
        let op = Op::ZinbNll {
            mu,
            theta,
            pi,
            target: Arc::clone(target),
            logits,
        };
        self.push("zinb_nll", Matrix::filled(1, 1, total), op, &[mu, theta, pi])
    }

    /// Hash of the active side of every relu and clamp on the tape.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the recorded function.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for &x in self.nodes[a.0].value.data() {
                        (x > 0.0).hash(&mut hasher);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for &x in self.nodes[a.0].value.data() {
                        ((x >= lo) as u8 + (x <= hi) as u8 * 2).hash(&mut hasher);
                    }
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if node.param {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.param { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, contribution: Matrix) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn elementwise(&self, g: &Matrix, a: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let va = self.value(a);
        let data = g.data().iter().zip(va.data()).map(|(&gi, &x)| f(gi, x)).collect();
        Matrix::from_vec(g.rows(), g.cols(), data).expect("gradient shape")
    }

    fn reduce_broadcast(&self, b: Var, g: &Matrix, sign: f64) -> Matrix {
        let vb = self.value(b);
        if vb.shape() == g.shape() {
            return if sign == 1.0 { g.clone() } else { g.map(|x| -x) };
        }
        let mut out = Matrix::zeros(1, g.cols());
        for i in 0..g.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(g.row(i)) {
                *o += sign * x;
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SpMM(sparse, b) => {
                let gb = sparse.transpose_matmul_dense(g)?;
                self.accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let gb = self.reduce_broadcast(*b, g, 1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let gb = self.reduce_broadcast(*b, g, -1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = self.elementwise(g, *b, |gi, y| gi * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.elementwise(g, *a, |gi, x| gi * x);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let ga = Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                let gb = Matrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let ga = self.elementwise(g, *a, |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = self.elementwise(g, *a, |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 - s)
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = self.elementwise(g, *a, |gi, x| gi * sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = self.elementwise(g, *a, |gi, x| gi * x.exp());
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = self.elementwise(g, *a, |gi, x| gi / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Lgamma(a) => {
                let ga = self.elementwise(g, *a, |gi, x| gi * digamma(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = self.elementwise(g, *a, |gi, x| if x >= lo && x <= hi { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0) / n));
            }
            Op::RowL2Normalize(a, norms) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let proj = dot(g.row(i), y.row(i));
                    for ((o, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gi - yi * proj) / norms[i];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let proj = dot(g.row(i), y.row(i));
                    for ((o, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yi * (gi - proj);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PairDots(a, pairs) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let gp = g.get(p, 0);
                    if gp == 0.0 {
                        continue;
                    }
                    for k in 0..va.cols() {
                        let (ai, aj) = (va.get(i, k), va.get(j, k));
                        ga.row_mut(i)[k] += gp * aj;
                        ga.row_mut(j)[k] += gp * ai;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ZinbNll {
                mu,
                theta,
                pi,
                target,
                logits,
            } => {
                let scale = g.get(0, 0);
                let entry = if *logits { zinb_entry_logits } else { zinb_entry };
                let (vm, vt, vp) = (self.value(*mu), self.value(*theta), self.value(*pi));
                let (rows, cols) = vm.shape();
                let mut gm = Matrix::zeros(rows, cols);
                let mut gt = Matrix::zeros(rows, cols);
                let mut gp = Matrix::zeros(rows, cols);
                for (idx, &x) in target.data().iter().enumerate() {
                    let e = entry(x, vm.data()[idx], vt.data()[idx], vp.data()[idx]);
                    gm.data_mut()[idx] = -scale * e.d_mu;
                    gt.data_mut()[idx] = -scale * e.d_theta;
                    gp.data_mut()[idx] = -scale * e.d_pi;
                }
                self.accumulate(grads, *mu, gm);
                self.accumulate(grads, *theta, gt);
                self.accumulate(grads, *pi, gp);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-probability of one ZINB observation and its partial derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ZinbEntry {
    pub log_prob: f64,
    pub d_mu: f64,
    pub d_theta: f64,
    pub d_pi: f64,
}

pub(crate) fn zinb_entry(x: f64, mu: f64, theta: f64, pi: f64) -> ZinbEntry {
    let log_theta_ratio = theta.ln() - (theta + mu).ln();
    // log of the negative-binomial mass at zero, (θ/(θ+μ))^θ
    let log_nb_zero = theta * log_theta_ratio;
    let d_nb_zero_theta = log_theta_ratio + mu / (theta + mu);
    let d_nb_zero_mu = -theta / (theta + mu);
    if x == 0.0 {
        let a = pi.ln();
        let b = (-pi).ln_1p() + log_nb_zero;
        let hi = a.max(b);
        let log_prob = hi + ((a - hi).exp() + (b - hi).exp()).ln();
        // responsibility of the negative-binomial component
        let w_nb = (b - log_prob).exp();
        let d_pi = (-log_prob).exp() * (1.0 - log_nb_zero.exp());
        ZinbEntry {
            log_prob,
            d_mu: w_nb * d_nb_zero_mu,
            d_theta: w_nb * d_nb_zero_theta,
            d_pi,
        }
    } else {
        let log_prob = (-pi).ln_1p() + ln_gamma(x + theta) - ln_gamma(theta) - ln_gamma(x + 1.0)
            + log_nb_zero
            + x * (mu.ln() - (theta + mu).ln());
        ZinbEntry {
            log_prob,
            d_mu: x / mu - (theta + x) / (theta + mu),
            d_theta: digamma(x + theta) - digamma(theta) + d_nb_zero_theta - x / (theta + mu),
            d_pi: -1.0 / (1.0 - pi),
        }
    }
}

/// [`zinb_entry`] parameterized by `ln μ` and the logit of `π`; `d_mu` and
/// `d_pi` hold derivatives with respect to those.
pub(crate) fn zinb_entry_logits(x: f64, log_mu: f64, theta: f64, pi_logit: f64) -> ZinbEntry {
    let log_theta = theta.ln();
    let hi = log_theta.max(log_mu);
    // ln(θ + μ)
    let log_sum = hi + ((log_theta - hi).exp() + (log_mu - hi).exp()).ln();
    let log_theta_ratio = log_theta - log_sum;
    let log_nb_zero = theta * log_theta_ratio;
    // μ/(θ+μ)
    let share = (log_mu - log_sum).exp();
    let d_nb_zero_theta = log_theta_ratio + share;
    let d_nb_zero_log_mu = -theta * share;
    let log_pi = -softplus(-pi_logit);
    let log_keep = -softplus(pi_logit);
    if x == 0.0 {
        let a = log_pi;
        let b = log_keep + log_nb_zero;
        let top = a.max(b);
        let log_prob = top + ((a - top).exp() + (b - top).exp()).ln();
        let w_nb = (b - log_prob).exp();
        let d_pi = (log_pi + log_keep - log_prob).exp() * (1.0 - log_nb_zero.exp());
        ZinbEntry {
            log_prob,
            d_mu: w_nb * d_nb_zero_log_mu,
            d_theta: w_nb * d_nb_zero_theta,
            d_pi,
        }
    } else {
        let log_prob = log_keep + ln_gamma(x + theta) - ln_gamma(theta) - ln_gamma(x + 1.0)
            + log_nb_zero
            + x * (log_mu - log_sum);
        ZinbEntry {
            log_prob,
            d_mu: x - (theta + x) * share,
            d_theta: digamma(x + theta) - digamma(theta) + d_nb_zero_theta - x * (-log_sum).exp(),
            d_pi: -sigmoid(pi_logit),
        }
    }
}
