//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every forward op appends a node holding its value and parent ids, so the
//! tape is topologically ordered by construction and `backward` is a single
//! sweep in descending id order. Nodes that do not depend on a leaf are
//! tracked as constants and never receive gradient.
//!
//! ```
//! use ndcn::autodiff::Tape;
//! use ndcn::Matrix;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Matrix::column(&[1.0, -2.0]));
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().as_slice(), &[2.0, -4.0]);
//! ```

use crate::error::{invalid, Error, Result};
use crate::matrix::gemm;
use crate::odeint::{lin_comb_values, OdeState};
use crate::operators::DiffOp;
use crate::Matrix;
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    SparseApply(Arc<DiffOp>, usize),
    AddRowBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LinComb(Vec<(f64, usize)>),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    MeanAbsDiff(usize, Rc<Matrix>),
    LogSoftmaxRows(usize),
}

struct Node {
    op: Op,
    value: Rc<Matrix>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// A matrix value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Rc<Matrix>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
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

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(Op::Constant, value, false)
    }

    fn push(&self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        let value = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::clone(&value),
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            value,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op: Op, value: Matrix, parents: &[usize]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(op, value, requires_grad))
    }

    /// `sum_i c_i x_i` as a single node.
    pub fn lin_comb(&self, terms: &[(f64, &Var)]) -> Result<Var> {
        for (_, v) in terms {
            self.check_same(v)?;
        }
        let value = lin_comb_values(terms.iter().map(|(c, v)| (*c, v.value.as_ref())))?;
        let parents: Vec<usize> = terms.iter().map(|(_, v)| v.id).collect();
        let op = Op::LinComb(terms.iter().map(|(c, v)| (*c, v.id)).collect());
        self.record(op, value, &parents)
    }

    fn check_same(&self, v: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.nodes, &v.tape.nodes) {
            return Err(invalid("operands live on different tapes"));
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::SparseApply(..) => "sparse_apply",
        Op::AddRowBias(..) => "add_row_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::LinComb(..) => "lin_comb",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Sum(..) => "sum",
        Op::MeanAbsDiff(..) => "mean_abs_diff",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    fn binary(&self, other: &Var) -> Result<()> {
        self.tape.check_same(other)
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.binary(rhs)?;
        let value = self.value.matmul(&rhs.value)?;
        self.tape
            .record(Op::MatMul(self.id, rhs.id), value, &[self.id, rhs.id])
    }

    /// `op * self`; the operator is a constant.
    pub fn sparse_apply(&self, op: &Arc<DiffOp>) -> Result<Var> {
        let value = op.apply(&self.value)?;
        self.tape
            .record(Op::SparseApply(Arc::clone(op), self.id), value, &[self.id])
    }

    /// Adds the `1 x d` row `bias` to every row.
    pub fn add_row_bias(&self, bias: &Var) -> Result<Var> {
        self.binary(bias)?;
        if bias.value.rows() != 1 || bias.value.cols() != self.value.cols() {
            return Err(invalid(format!(
                "bias {:?} does not fit {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let mut value = (*self.value).clone();
        let b = bias.value.row(0);
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.tape
            .record(Op::AddRowBias(self.id, bias.id), value, &[self.id, bias.id])
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other)?;
        let value = self.value.zip_map(&other.value, |a, b| a + b)?;
        self.tape
            .record(Op::Add(self.id, other.id), value, &[self.id, other.id])
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other)?;
        let value = self.value.zip_map(&other.value, |a, b| a - b)?;
        self.tape
            .record(Op::Sub(self.id, other.id), value, &[self.id, other.id])
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other)?;
        let value = self.value.zip_map(&other.value, |a, b| a * b)?;
        self.tape
            .record(Op::Mul(self.id, other.id), value, &[self.id, other.id])
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let value = self.value.scaled(c);
        self.tape.record(Op::Scale(self.id, c), value, &[self.id])
    }

    pub fn tanh(&self) -> Result<Var> {
        let value = self.value.map(f64::tanh);
        self.tape.record(Op::Tanh(self.id), value, &[self.id])
    }

    pub fn relu(&self) -> Result<Var> {
        let value = self.value.map(|v| if v > 0.0 { v } else { 0.0 });
        self.tape.record(Op::Relu(self.id), value, &[self.id])
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let value = self.value.map(sigmoid);
        self.tape.record(Op::Sigmoid(self.id), value, &[self.id])
    }

    /// Sum of all entries, as a `1 x 1` value.
    pub fn sum(&self) -> Result<Var> {
        let value = Matrix::scalar(self.value.sum());
        self.tape.record(Op::Sum(self.id), value, &[self.id])
    }

    /// Mean element-wise `|self - target|`; the target is a constant.
    pub fn mean_abs_diff(&self, target: &Matrix) -> Result<Var> {
        self.value.expect_same_shape(target, "mean_abs_diff")?;
        let n = self.value.len().max(1) as f64;
        let total: f64 = self
            .value
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let target = Rc::new(target.clone());
        self.tape.record(
            Op::MeanAbsDiff(self.id, target),
            Matrix::scalar(total / n),
            &[self.id],
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Result<Var> {
        let mut value = (*self.value).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape
            .record(Op::LogSoftmaxRows(self.id), value, &[self.id])
    }

    /// Reverse sweep from this scalar node.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.shape() != (1, 1) {
            return Err(invalid(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape()
            )));
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; self.id + 1];
        grads[self.id] = Some(Matrix::scalar(1.0));
        let mut leaves = Vec::new();
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |p: usize| -> &Matrix { &nodes[p].value };
            let wants = |p: usize| nodes[p].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaves.push((id, g));
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(a) {
                        let slot = slot(&mut grads, a, val(a).shape());
                        gemm(1.0, g.view(false), val(b).view(true), 1.0, slot);
                    }
                    if wants(b) {
                        let slot = slot(&mut grads, b, val(b).shape());
                        gemm(1.0, val(a).view(true), g.view(false), 1.0, slot);
                    }
                }
                Op::SparseApply(op, x) => {
                    if wants(*x) {
                        // symmetric operator: the adjoint is the operator itself
                        let contrib = op.apply(&g)?;
                        accumulate(&mut grads, *x, 1.0, &contrib);
                    }
                }
                Op::AddRowBias(x, b) => {
                    if wants(*b) {
                        let mut col_sums = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (s, v) in col_sums.row_mut(0).iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads, *b, 1.0, &col_sums);
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, 1.0, &g);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, 1.0, &g);
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, 1.0, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, 1.0, &g);
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, -1.0, &g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, 1.0, &g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, 1.0, &g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(x, c) => {
                    if wants(*x) {
                        accumulate(&mut grads, *x, *c, &g);
                    }
                }
                Op::LinComb(terms) => {
                    for &(c, p) in terms {
                        if wants(p) {
                            accumulate(&mut grads, p, c, &g);
                        }
                    }
                }
                Op::Tanh(x) => {
                    if wants(*x) {
                        let d = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                        accumulate(&mut grads, *x, 1.0, &d);
                    }
                }
                Op::Relu(x) => {
                    if wants(*x) {
                        let d = g.zip_map(val(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                        accumulate(&mut grads, *x, 1.0, &d);
                    }
                }
                Op::Sigmoid(x) => {
                    if wants(*x) {
                        let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                        accumulate(&mut grads, *x, 1.0, &d);
                    }
                }
                Op::Sum(x) => {
                    if wants(*x) {
                        let (r, c) = val(*x).shape();
                        accumulate(&mut grads, *x, 1.0, &Matrix::filled(r, c, g.item()));
                    }
                }
                Op::MeanAbsDiff(x, target) => {
                    if wants(*x) {
                        let scale = g.item() / val(*x).len().max(1) as f64;
                        let d = val(*x).zip_map(target, |a, b| {
                            if a > b {
                                scale
                            } else if a < b {
                                -scale
                            } else {
                                0.0
                            }
                        })?;
                        accumulate(&mut grads, *x, 1.0, &d);
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    if wants(*x) {
                        let y = &node.value;
                        let mut d = g.clone();
                        for r in 0..d.rows() {
                            let total: f64 = g.row(r).iter().sum();
                            for (dv, yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                                *dv -= yv.exp() * total;
                            }
                        }
                        accumulate(&mut grads, *x, 1.0, &d);
                    }
                }
            }
        }
        Ok(Gradients {
            grads: leaves.into_iter().collect(),
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], id: usize, shape: (usize, usize)) -> &'a mut Matrix {
    grads[id].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, c: f64, g: &Matrix) {
    match &mut grads[id] {
        Some(acc) => acc.axpy(c, g),
        slot @ None => *slot = Some(if c == 1.0 { g.clone() } else { g.scaled(c) }),
    }
}

/// Gradients of a scalar with respect to the leaves that influenced it.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: std::collections::BTreeMap<usize, Matrix>,
}

impl Gradients {
    /// `None` when the variable is not a leaf or did not affect the loss.
    pub fn get(&self, v: &Var) -> Option<&Matrix> {
        self.grads.get(&v.id)
    }

    /// Gradient of a leaf, with zeros when it did not affect the loss.
    pub fn get_or_zeros(&self, v: &Var) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(v.value.rows(), v.value.cols()))
    }

    pub fn by_id(&self) -> &std::collections::BTreeMap<usize, Matrix> {
        &self.grads
    }
}

impl OdeState for Var {
    fn value(&self) -> &Matrix {
        &self.value
    }

    fn lin_comb(terms: &[(f64, &Self)]) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| invalid("empty linear combination"))?;
        first.1.tape.lin_comb(terms)
    }
}

/// Mean negative log-likelihood over the masked rows, using row-wise
/// log-softmax of `logits` against one-hot `labels`.
pub fn cross_entropy_masked(logits: &Var, labels: &Matrix, mask: &[bool]) -> Result<Var> {
    logits
        .value
        .expect_same_shape(labels, "cross_entropy_masked")?;
    if mask.len() != labels.rows() {
        return Err(invalid("mask length differs from row count"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(invalid("empty mask"));
    }
    let mut weights = Matrix::zeros(labels.rows(), labels.cols());
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid(format!("label row {r} is not one-hot")));
        }
        for (w, &y) in weights.row_mut(r).iter_mut().zip(row) {
            *w = -y / count as f64;
        }
    }
    let weights = logits.tape.constant(weights);
    logits.log_softmax_rows()?.mul(&weights)?.sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 3));
        let y = x.tanh().unwrap();
        assert_eq!(y.value(), &Matrix::zeros(2, 3));
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn relu_kink_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![-1.0, 2.0, 0.0]]).unwrap());
        let y = x.relu().unwrap();
        assert_eq!(y.value().as_slice(), &[0.0, 2.0, 0.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_and_square() {
        let tape = Tape::new();
        let xm = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = tape.leaf(xm.clone());
        let g = x.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &Matrix::filled(2, 2, 1.0));
        let g = x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &xm.scaled(2.0));
    }

    #[test]
    fn shared_parent_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::column(&[1.5, -0.5]));
        let once = x.scale(3.0).unwrap().sum().unwrap().backward().unwrap();
        let twice = x
            .scale(3.0)
            .unwrap()
            .add(&x.scale(3.0).unwrap())
            .unwrap()
            .sum()
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(twice.get(&x).unwrap(), &once.get(&x).unwrap().scaled(2.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Matrix::column(&[1.0, 2.0]));
        let x = tape.leaf(Matrix::column(&[3.0, 4.0]));
        let g = c.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.get(&x).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn errors() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 3));
        assert!(a.matmul(&a).is_err());
        assert!(a.add(&tape.leaf(Matrix::zeros(3, 2))).is_err());
        assert!(a.backward().is_err());
        let other = Tape::new().leaf(Matrix::zeros(2, 3));
        assert!(a.add(&other).is_err());
        assert!(a.add_row_bias(&tape.leaf(Matrix::zeros(1, 2))).is_err());
    }

    #[test]
    fn nan_is_reported_in_debug() {
        if cfg!(debug_assertions) {
            let tape = Tape::new();
            let x = tape.leaf(Matrix::scalar(f64::INFINITY));
            assert!(matches!(x.scale(0.0), Err(Error::Numeric(_))));
        }
    }

    #[test]
    fn cross_entropy_basics() {
        let tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros(4, 3));
        let labels = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let loss = cross_entropy_masked(&logits, &labels, &[true, true, false, true]).unwrap();
        assert!((loss.value().item() - 3f64.ln()).abs() < 1e-15);

        let mut confident = labels.scaled(1e3);
        confident.set(3, 0, 0.0);
        let logits = tape.leaf(confident);
        let loss = cross_entropy_masked(&logits, &labels, &[true; 4]).unwrap();
        assert!(loss.value().item() <= 1e-6);

        assert!(cross_entropy_masked(&logits, &labels, &[false; 4]).is_err());
        let mut bad = labels.clone();
        bad.set(0, 1, 1.0);
        assert!(cross_entropy_masked(&logits, &bad, &[true; 4]).is_err());
    }
}
