//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! A [`Tape`] is rebuilt for every optimization step. Leaves are either
//! constants or [`Param`]s borrowed from a [`ParamStore`]; after
//! [`Tape::backward`] the gradients of trainable parameters are accumulated
//! into the store. Frozen parameters never receive gradient.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

/// Norm floor used by [`Tape::l2_normalize`] and [`Tape::cosine`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("loss node must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("target class {target} out of range for {classes} logits")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("{op} expects a row vector, got {shape:?}")]
    NotRowVector {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-registering a name replaces its value.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        let grad = Matrix::zeros(value.rows(), value.cols());
        if let Some(&id) = self.by_name.get(&name) {
            self.params[id.0] = Param {
                name,
                value,
                grad,
                trainable,
            };
            return id;
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(0.0));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// L2 norm over the gradients of all trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    RowMean(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    L2Normalize(NodeId),
    Cosine(NodeId, NodeId),
    SoftmaxCrossEntropy(NodeId, usize),
    FrobeniusSq(NodeId),
    Log(NodeId),
    ExpSum(NodeId),
    LogSumExp(NodeId),
    ConcatCols(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
#[derive(Clone, Debug, Default)]
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(Op::Param(id), p.value.clone(), p.trainable)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNt(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), v, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), v, rg)
    }

    /// Column-wise mean over rows: `n×d -> 1×d`.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).row_mean();
        let rg = self.rg(&[a]);
        self.push(Op::RowMean(a), v, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), v, rg)
    }

    /// Divides each row by `max(‖row‖₂, NORM_EPS)`.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.rows() {
            let n = linalg::vec_norm(x.row(i)).max(NORM_EPS);
            v.row_mut(i).iter_mut().for_each(|e| *e /= n);
        }
        let rg = self.rg(&[a]);
        self.push(Op::L2Normalize(a), v, rg)
    }

    /// Cosine similarity of two row vectors, norms clamped at `NORM_EPS`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (u, w) = (self.value(a), self.value(b));
        if u.rows() != 1 {
            return Err(AutodiffError::NotRowVector {
                op: "cosine",
                shape: u.shape(),
            });
        }
        let dot = u.dot(w)?;
        let nu = linalg::vec_norm(u.data()).max(NORM_EPS);
        let nw = linalg::vec_norm(w.data()).max(NORM_EPS);
        let v = Matrix::filled(1, 1, dot / (nu * nw));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Cosine(a, b), v, rg))
    }

    /// `−log softmax(logits)[target]` for a 1×V row of logits, max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let x = self.value(logits);
        if x.rows() != 1 {
            return Err(AutodiffError::NotRowVector {
                op: "softmax_cross_entropy",
                shape: x.shape(),
            });
        }
        if target >= x.cols() {
            return Err(AutodiffError::TargetOutOfRange {
                target,
                classes: x.cols(),
            });
        }
        let v = Matrix::filled(1, 1, log_sum_exp(x.data()) - x.data()[target]);
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, target), v, rg))
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).data().iter().map(|x| x * x).sum());
        let rg = self.rg(&[a]);
        self.push(Op::FrobeniusSq(a), v, rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = x.data().iter().find(|&&e| e <= 0.0) {
            return Err(AutodiffError::LogDomain(bad));
        }
        let v = x.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Log(a), v, rg))
    }

    /// `Σ exp(x)` over all elements.
    pub fn exp_sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).data().iter().map(|x| x.exp()).sum());
        let rg = self.rg(&[a]);
        self.push(Op::ExpSum(a), v, rg)
    }

    /// `log Σ exp(x)` over all elements, max-shifted.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, log_sum_exp(self.value(a).data()));
        let rg = self.rg(&[a]);
        self.push(Op::LogSumExp(a), v, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(LinalgError::DimensionMismatch {
                op: "concat_cols",
                left: x.shape(),
                right: y.shape(),
            }
            .into());
        }
        let mut v = Matrix::zeros(x.rows(), x.cols() + y.cols());
        for i in 0..x.rows() {
            v.row_mut(i)[..x.cols()].copy_from_slice(x.row(i));
            v.row_mut(i)[x.cols()..].copy_from_slice(y.row(i));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), v, rg))
    }

    /// Gradients of `loss` with respect to every node.
    ///
    /// Entries are `None` for nodes that do not depend on a trainable leaf.
    pub fn gradients(&self, loss: NodeId) -> Result<Vec<Option<Matrix>>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Backpropagates from a scalar loss and accumulates (`+=`) into the
    /// gradients of trainable parameters in `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, grad) {
                let p = store.get_mut(*pid);
                if p.trainable {
                    p.grad.axpy(1.0, &g)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let g0 = g.data()[0];
        match *op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, linalg::matmul_nt(g, self.value(b))?)?;
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, linalg::matmul_tn(self.value(a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, linalg::matmul(g, self.value(b))?)?;
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, linalg::matmul_tn(g, self.value(a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-1.0))?;
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s))?,
            Op::Sum(a) => {
                let x = self.value(a);
                self.accumulate(grads, a, Matrix::filled(x.rows(), x.cols(), g0))?;
            }
            Op::RowMean(a) => {
                let x = self.value(a);
                let n = x.rows() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for (e, gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *e = gv / n;
                    }
                }
                self.accumulate(grads, a, d)?;
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, a, d)?;
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, a, d)?;
            }
            Op::L2Normalize(a) => {
                let x = self.value(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let raw = linalg::vec_norm(x.row(i));
                    let gr = g.row(i);
                    let dr = d.row_mut(i);
                    if raw > NORM_EPS {
                        let y = out.row(i);
                        let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((e, gv), yv) in dr.iter_mut().zip(gr).zip(y) {
                            *e = (gv - yv * yg) / raw;
                        }
                    } else {
                        for (e, gv) in dr.iter_mut().zip(gr) {
                            *e = gv / NORM_EPS;
                        }
                    }
                }
                self.accumulate(grads, a, d)?;
            }
            Op::Cosine(a, b) => {
                let (u, w) = (self.value(a), self.value(b));
                let c = out.data()[0];
                let ru = linalg::vec_norm(u.data());
                let rw = linalg::vec_norm(w.data());
                let nu = ru.max(NORM_EPS);
                let nw = rw.max(NORM_EPS);
                if self.requires_grad(a) {
                    let shrink = if ru > NORM_EPS { c / (nu * nu) } else { 0.0 };
                    let d = w.zip_map(u, |wv, uv| g0 * (wv / (nu * nw) - shrink * uv))?;
                    self.accumulate(grads, a, d)?;
                }
                if self.requires_grad(b) {
                    let shrink = if rw > NORM_EPS { c / (nw * nw) } else { 0.0 };
                    let d = u.zip_map(w, |uv, wv| g0 * (uv / (nu * nw) - shrink * wv))?;
                    self.accumulate(grads, b, d)?;
                }
            }
            Op::SoftmaxCrossEntropy(a, target) => {
                let mut p = softmax(self.value(a).data());
                p[target] -= 1.0;
                let cols = p.len();
                let d = Matrix::from_vec(1, cols, p.into_iter().map(|v| v * g0).collect());
                self.accumulate(grads, a, d)?;
            }
            Op::FrobeniusSq(a) => self.accumulate(grads, a, self.value(a).scale(2.0 * g0))?,
            Op::Log(a) => {
                let d = g.zip_map(self.value(a), |gv, x| gv / x)?;
                self.accumulate(grads, a, d)?;
            }
            Op::ExpSum(a) => self.accumulate(grads, a, self.value(a).map(|x| g0 * x.exp()))?,
            Op::LogSumExp(a) => {
                let x = self.value(a);
                let p = softmax(x.data());
                let d = Matrix::from_vec(x.rows(), x.cols(), p.into_iter().map(|v| v * g0).collect());
                self.accumulate(grads, a, d)?;
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for i in 0..g.rows() {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, db)?;
            }
        }
        Ok(())
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_sq_gradient() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Matrix::row_vector(&[1.0, 2.0]), true);
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let loss = tape.frobenius_sq(xn);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad, Matrix::row_vector(&[2.0, 4.0]));
    }

    #[test]
    fn cosine_gradient_vanishes_at_maximum() {
        let mut store = ParamStore::new();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let u = store.insert("u", Matrix::row_vector(&[s, s]), true);
        let mut tape = Tape::new();
        let un = tape.param(&store, u);
        let vn = tape.constant(Matrix::row_vector(&[s, s]));
        let c = tape.cosine(un, vn).unwrap();
        tape.backward(c, &mut store).unwrap();
        assert!(store.get(u).grad.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Matrix::filled(3, 2, 0.5), true);
        let mut tape = Tape::new();
        let n = tape.param(&store, p);
        let loss = tape.sum(n);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad, Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn frozen_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Matrix::filled(2, 2, 0.3), false);
        let b = store.insert("b", Matrix::filled(2, 2, -0.2), true);
        let mut tape = Tape::new();
        let an = tape.param(&store, a);
        let bn = tape.param(&store, b);
        let ab = tape.matmul(an, bn).unwrap();
        let aab = tape.matmul(an, ab).unwrap();
        let t = tape.tanh(aab);
        let loss = tape.frobenius_sq(t);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(a).grad.data().iter().all(|&g| g == 0.0));
        assert!(store.get(b).grad.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Matrix::filled(2, 2, 1.0), true);
        let mut tape = Tape::new();
        let n = tape.param(&store, p);
        assert_eq!(
            tape.backward(n, &mut store),
            Err(AutodiffError::NonScalarLoss((2, 2)))
        );
    }

    #[test]
    fn l2_normalize_clamps_zero_vector() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::zeros(1, 3));
        let n = tape.l2_normalize(z);
        assert_eq!(tape.value(n), &Matrix::zeros(1, 3));
    }

    #[test]
    fn softmax_ce_rejects_bad_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(
            tape.softmax_cross_entropy(l, 3),
            Err(AutodiffError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Matrix::row_vector(&[1.0, -1.0]), true);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let n = tape.param(&store, p);
            let loss = tape.sum(n);
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(p).grad, Matrix::row_vector(&[2.0, 2.0]));
    }
}
