//! Reverse-mode differentiation over a linear record of primitives.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! topologically ordered by construction, and [`Tape::backward`] walks them
//! in exact reverse order. Backward consumes the tape.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use super::{NumericsError, LOG_EPS};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Elu(usize),
    Softmax(usize),
    CrossEntropy { p: usize, target: Vec<f64>, weight: f64 },
    Entropy(usize),
    GradReverse(usize, f64),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Scale(usize, f64),
    SumAll(usize),
    Sum(Vec<usize>),
    Square(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    tag: Option<usize>,
}

#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            tag: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf whose gradient is reported under `tag`.
    pub fn tagged(&mut self, value: Tensor, tag: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.index].tag = Some(tag);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let g = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), g))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(ta.shape(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib, out) = self.zip(a, b, "add", |x, y| x + y)?;
        let g = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Add(ia, ib), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib, out) = self.zip(a, b, "sub", |x, y| x - y)?;
        let g = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Sub(ia, ib), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib, out) = self.zip(a, b, "mul", |x, y| x * y)?;
        let g = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Mul(ia, ib), g))
    }

    /// Adds a 1×cols bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if tb.len() != tx.cols() {
            return Err(mismatch("add_row_bias", tx, tb));
        }
        let cols = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v + tb.data()[k % cols])
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        let g = self.needs(ix) || self.needs(ib);
        Ok(self.push(out, Op::AddRowBias(ix, ib), g))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(super::elu);
        let g = self.needs(ix);
        Ok(self.push(out, Op::Elu(ix), g))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            data.extend(super::softmax(row));
        }
        let out = Tensor::new(t.shape(), data)?;
        let g = self.needs(ix);
        Ok(self.push(out, Op::Softmax(ix), g))
    }

    /// `-weight * sum_k q_k ln(p_k + LOG_EPS)` as a 1×1 tensor.
    pub fn cross_entropy(&mut self, p: Var, target: &[f64], weight: f64) -> Result<Var, NumericsError> {
        let ip = self.idx(p)?;
        let tp = &self.nodes[ip].value;
        if tp.len() != target.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: tp.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let out = Tensor::scalar(weight * super::cross_entropy(tp.data(), target));
        let g = self.needs(ip);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                p: ip,
                target: target.to_vec(),
                weight,
            },
            g,
        ))
    }

    /// `-sum_k p_k ln(p_k + LOG_EPS)` as a 1×1 tensor.
    pub fn entropy(&mut self, p: Var) -> Result<Var, NumericsError> {
        let ip = self.idx(p)?;
        let out = Tensor::scalar(super::entropy(self.nodes[ip].value.data()));
        let g = self.needs(ip);
        Ok(self.push(out, Op::Entropy(ip), g))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.clone();
        let g = self.needs(ix);
        Ok(self.push(out, Op::GradReverse(ix, lambda), g))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let rows = self.nodes[idxs[0]].value.rows();
        for &i in &idxs {
            if self.nodes[i].value.rows() != rows {
                return Err(mismatch("concat_cols", &self.nodes[idxs[0]].value, &self.nodes[i].value));
            }
        }
        let total: usize = idxs.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                let t = &self.nodes[i].value;
                data.extend_from_slice(&t.data()[r * t.cols()..(r + 1) * t.cols()]);
            }
        }
        let g = idxs.iter().any(|&i| self.needs(i));
        Ok(self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(idxs), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.clone().reshaped(shape)?;
        let g = self.needs(ix);
        Ok(self.push(out, Op::Reshape(ix), g))
    }

    /// Row-major flatten into a 1×len row vector.
    pub fn flatten(&mut self, x: Var) -> Result<Var, NumericsError> {
        let len = self.value(x).len();
        self.reshape(x, &[1, len])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * c);
        let g = self.needs(ix);
        Ok(self.push(out, Op::Scale(ix, c), g))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.data().iter().sum());
        let g = self.needs(ix);
        Ok(self.push(out, Op::SumAll(ix), g))
    }

    /// Elementwise sum of same-shape values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let first = &self.nodes[idxs[0]].value;
        let mut acc = Tensor::zeros(first.shape());
        for &i in &idxs {
            let t = &self.nodes[i].value;
            if t.shape() != acc.shape() {
                return Err(mismatch("sum", &acc, t));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        let g = idxs.iter().any(|&i| self.needs(i));
        Ok(self.push(acc, Op::Sum(idxs), g))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * v);
        let g = self.needs(ix);
        Ok(self.push(out, Op::Square(ix), g))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, NumericsError> {
        let il = self.idx(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(NumericsError::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            tags: self.nodes.iter().map(|n| n.tag).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |buf| matmul_nt_into(g, tb.data(), buf, m, n, k));
                acc(*b, &mut |buf| matmul_tn_into(ta.data(), g, buf, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g, 1.0));
                acc(*b, &mut |buf| add_into(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g, 1.0));
                acc(*b, &mut |buf| add_into(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |buf| {
                    for ((o, &gk), &bk) in buf.iter_mut().zip(g).zip(tb.data()) {
                        *o += gk * bk;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gk), &ak) in buf.iter_mut().zip(g).zip(ta.data()) {
                        *o += gk * ak;
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let cols = y.cols();
                acc(*x, &mut |buf| add_into(buf, g, 1.0));
                acc(*b, &mut |buf| {
                    for (k, &gk) in g.iter().enumerate() {
                        buf[k % cols] += gk;
                    }
                });
            }
            Op::Elu(x) => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |buf| {
                    for ((o, &gk), (&xk, &yk)) in buf.iter_mut().zip(g).zip(tx.data().iter().zip(y.data())) {
                        *o += if xk >= 0.0 { gk } else { gk * (yk + 1.0) };
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                acc(*x, &mut |buf| {
                    for ((orow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, &gk), &yk) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yk * (gk - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { p, target, weight } => {
                let tp = &nodes[*p].value;
                let scale = g[0] * weight;
                acc(*p, &mut |buf| {
                    for ((o, &pk), &qk) in buf.iter_mut().zip(tp.data()).zip(target) {
                        *o -= scale * qk / (pk + LOG_EPS);
                    }
                });
            }
            Op::Entropy(p) => {
                let tp = &nodes[*p].value;
                acc(*p, &mut |buf| {
                    for (o, &pk) in buf.iter_mut().zip(tp.data()) {
                        *o -= g[0] * (libm::log(pk + LOG_EPS) + pk / (pk + LOG_EPS));
                    }
                });
            }
            Op::GradReverse(x, lambda) => {
                acc(*x, &mut |buf| add_into(buf, g, -lambda));
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &j in parts {
                    let cj = nodes[j].value.cols();
                    acc(j, &mut |buf| {
                        for (r, orow) in buf.chunks_mut(cj).enumerate() {
                            for (c, o) in orow.iter_mut().enumerate() {
                                *o += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += cj;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g, 1.0)),
            Op::Scale(x, c) => acc(*x, &mut |buf| add_into(buf, g, *c)),
            Op::SumAll(x) => acc(*x, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Sum(parts) => {
                for &j in parts {
                    acc(j, &mut |buf| add_into(buf, g, 1.0));
                }
            }
            Op::Square(x) => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |buf| {
                    for ((o, &gk), &xk) in buf.iter_mut().zip(g).zip(tx.data()) {
                        *o += 2.0 * xk * gk;
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64], c: f64) {
    for (o, &gk) in buf.iter_mut().zip(g) {
        *o += c * gk;
    }
}

/// Gradients of one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    shapes: Vec<Vec<usize>>,
    tags: Vec<Option<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Result<Tensor, NumericsError> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(NumericsError::ForeignVar);
        }
        let shape = &self.shapes[v.index];
        Ok(match &self.grads[v.index] {
            Some(g) => Tensor::new(shape, g.clone())?,
            None => Tensor::zeros(shape),
        })
    }

    /// `(tag, gradient)` for every tagged leaf that received a gradient.
    pub fn tagged(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.tags
            .iter()
            .zip(&self.grads)
            .filter_map(|(tag, g)| Some((((*tag)?), g.as_deref()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, 2.0]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unrelated_input_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![3.0]));
        let p = tape.input(Tensor::row(vec![5.0]));
        let loss = tape.square(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), NumericsError::NotScalar(vec![1, 2]));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.input(Tensor::scalar(1.0));
        let _ = b.input(Tensor::scalar(1.0));
        assert_eq!(b.square(x).unwrap_err(), NumericsError::ForeignVar);
        assert_eq!(b.backward(x).unwrap_err(), NumericsError::ForeignVar);
    }

    #[test]
    fn grad_reverse_scales_by_minus_lambda() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.3));
        let r = tape.grad_reverse(x, 0.5).unwrap();
        assert_eq!(tape.value(r).item(), 0.3);
        let grads = tape.backward(r).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), -0.5);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.3));
        let r = tape.grad_reverse(x, 0.0).unwrap();
        let grads = tape.backward(r).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 0.0);
    }

    #[test]
    fn constants_do_not_collect_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.tagged(Tensor::scalar(3.0), 7);
        let y = tape.mul(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        let tagged: Vec<_> = grads.tagged().collect();
        assert_eq!(tagged, vec![(7, &[2.0][..])]);
        assert_eq!(grads.wrt(c).unwrap().item(), 0.0);
    }
}
