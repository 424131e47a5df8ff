//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in exact reverse order
//! and accumulates adjoints into the gradient buffers of trainable leaves.
//!
//! ```
//! use iin::numerics::{Tape, Tensor, Unary};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.unary(x, Unary::Square).unwrap();
//! let loss = tape.sum_all(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use super::kernels::{self, Unary};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Unary(Var, Unary),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Sum(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    PermuteCols(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Drops every recorded node, saved value and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Affine(x, w, b), rg))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let y = kernels::unary(self.value(x), f)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Unary(x, f), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = kernels::scale(self.value(x), c);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, c), rg)
    }

    /// `big + small`, broadcasting `small` over the leading axes of `big`.
    pub fn add_broadcast(&mut self, big: Var, small: Var) -> Result<Var> {
        let y = kernels::add_broadcast(self.value(big), self.value(small))?;
        let rg = self.rg(big) || self.rg(small);
        Ok(self.push(y, Op::AddBroadcast(big, small), rg))
    }

    /// `big * small`, broadcasting `small` over the leading axes of `big`.
    pub fn mul_broadcast(&mut self, big: Var, small: Var) -> Result<Var> {
        let y = kernels::mul_broadcast(self.value(big), self.value(small))?;
        let rg = self.rg(big) || self.rg(small);
        Ok(self.push(y, Op::MulBroadcast(big, small), rg))
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = kernels::reduce_sum(self.value(x), axes)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Sum(x, axes.to_vec()), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = kernels::sum_all(self.value(x));
        let rank = self.value(x).rank();
        let rg = self.rg(x);
        self.push(y, Op::Sum(x, (0..rank).collect()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_cols(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let y = kernels::concat_cols(&vals)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_rows(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::SliceRows(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let y = kernels::concat_rows(&vals)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn permute_cols(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = kernels::permute_cols(self.value(x), perm)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::PermuteCols(x, perm.to_vec()), rg))
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    match &mut self.grads[i] {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Constant => continue,
                op => {
                    let contributions = self.local_grads(i, op, &g)?;
                    for (v, c) in contributions {
                        accumulate(&mut adj[v.0], c);
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &self.nodes[i].value;
        let mut res = Vec::new();
        let mut want = |v: Var, f: &dyn Fn() -> Result<Tensor>| -> Result<()> {
            if self.rg(v) {
                res.push((v, f()?));
            }
            Ok(())
        };
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                want(*a, &|| Ok(kernels::matmul_nt(g, bv)))?;
                want(*b, &|| Ok(kernels::matmul_tn(av, g)))?;
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                want(*x, &|| Ok(kernels::matmul_nt(g, wv)))?;
                want(*w, &|| Ok(kernels::matmul_tn(xv, g)))?;
                want(*b, &|| {
                    let s = kernels::reduce_sum(g, &[0])?;
                    s.reshape(self.value(*b).shape().to_vec())
                })?;
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                want(*x, &|| {
                    let data = xv
                        .data()
                        .iter()
                        .zip(out.data())
                        .zip(g.data())
                        .map(|((xi, yi), gi)| gi * f.derivative(*xi, *yi))
                        .collect();
                    Tensor::new(xv.shape().to_vec(), data)
                })?;
            }
            Op::Add(a, b) => {
                want(*a, &|| Ok(g.clone()))?;
                want(*b, &|| Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                want(*a, &|| Ok(g.clone()))?;
                want(*b, &|| Ok(kernels::scale(g, -1.0)))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                want(*a, &|| kernels::mul(g, bv))?;
                want(*b, &|| kernels::mul(g, av))?;
            }
            Op::Scale(x, c) => {
                want(*x, &|| Ok(kernels::scale(g, *c)))?;
            }
            Op::AddBroadcast(big, small) => {
                want(*big, &|| Ok(g.clone()))?;
                let sv = self.value(*small);
                want(*small, &|| Ok(fold_broadcast(g, sv, |gi, _| gi)))?;
            }
            Op::MulBroadcast(big, small) => {
                let (bv, sv) = (self.value(*big), self.value(*small));
                want(*big, &|| kernels::mul_broadcast(g, sv))?;
                want(*small, &|| {
                    let prod = kernels::mul(g, bv)?;
                    Ok(fold_broadcast(&prod, sv, |p, _| p))
                })?;
            }
            Op::Sum(x, axes) => {
                let xv = self.value(*x);
                want(*x, &|| {
                    let (_, map) = kernels::reduce_index_map(xv.shape(), axes);
                    let data = map.iter().map(|&o| g.data()[o]).collect();
                    Tensor::new(xv.shape().to_vec(), data)
                })?;
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                want(*x, &|| {
                    let mut d = Tensor::zeros(xv.shape());
                    let (c, w) = (xv.cols(), g.cols());
                    for r in 0..xv.rows() {
                        d.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    Ok(d)
                })?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    want(*p, &|| kernels::slice_cols(g, start, w))?;
                    start += w;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                want(*x, &|| {
                    let mut d = Tensor::zeros(xv.shape());
                    let c = xv.cols();
                    d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    Ok(d)
                })?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    want(*p, &|| kernels::slice_rows(g, start, r))?;
                    start += r;
                }
            }
            Op::PermuteCols(x, perm) => {
                let xv = self.value(*x);
                want(*x, &|| {
                    let mut d = Tensor::zeros(xv.shape());
                    let c = xv.cols();
                    for r in 0..xv.rows() {
                        let grow = g.row(r);
                        for (i, &p) in perm.iter().enumerate() {
                            d.data_mut()[r * c + p] += grow[i];
                        }
                    }
                    Ok(d)
                })?;
            }
        }
        Ok(res)
    }
}

fn fold_broadcast(g: &Tensor, small: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let w = small.numel().max(1);
    let mut acc = vec![0.0; small.numel()];
    for chunk in g.data().chunks(w) {
        for ((a, gi), si) in acc.iter_mut().zip(chunk).zip(small.data()) {
            *a += f(*gi, *si);
        }
    }
    Tensor::new(small.shape().to_vec(), acc).expect("same shape as small operand")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = t.sum_all(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = t.square(x).unwrap();
        let l = t.sum_all(s);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn repeated_backward_accumulates_and_zeroing_resets() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0]));
        let y = t.tanh(x).unwrap();
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        let first = t.grad(x).unwrap().clone();
        t.backward(l).unwrap();
        let twice = t.grad(x).unwrap().clone();
        for (a, b) in first.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &first);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let l = t.sum_all(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn clear_empties_tape() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        let _ = t.exp(x).unwrap();
        assert_eq!(t.len(), 2);
        t.clear();
        assert!(t.is_empty());
    }
}
