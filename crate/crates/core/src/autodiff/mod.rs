//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! Every operation appends a node to a [`Tape`]; node inputs always precede
//! the node itself, so a reverse walk over the tape is a valid topological
//! order for back-propagation. Gradients of leaves accumulate additively
//! across calls to [`Tape::backward`] until [`Tape::zero_grad`] is called.
//!
//! Most primitives operate on matrices: the last axis is the column axis and
//! all leading axes are flattened into rows. Sequence tensors are laid out
//! time-major (`row = t * batch + b`) so that one time step is a contiguous
//! row block.

mod lstm;

pub use lstm::{lstm_cell, lstm_step, LstmParams, GATES};

use std::rc::Rc;

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    GradReverse(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        mask: Rc<Vec<bool>>,
        on: Var,
        off: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    TimeSoftmax {
        scores: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
    },
    TimePool {
        alpha: Var,
        h: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`, each given
/// with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths were checked against the logical shapes by the
    // callers; strides describe in-bounds row-major or transposed views.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf node.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; zeros if the leaf has not been reached
    /// by any backward pass.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------------
    // Linear primitives
    // ---------------------------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector `[n]` to every row of `[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n || ta.shape().is_empty() {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(tr.data()).for_each(|(x, b)| *x += b);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Multiplies elementwise by a constant of the same length.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.len() {
            return Err(Error::shape("mul_const", t.shape(), &[factors.len()]));
        }
        let data = t.data().iter().zip(&factors).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, Rc::new(factors)), rg))
    }

    /// Concatenates along the last axis. All inputs must have the same
    /// leading shape.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.value(first).shape();
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.value(first).shape(), s));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if t.shape().is_empty() || start + len > cols {
            return Err(Error::shape("slice_cols", t.shape(), &[start, start + len]));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start + len > t.shape()[0] {
            return Err(Error::shape("slice_rows", t.shape(), &[start, start + len]));
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows(a, start), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Data(format!(
                    "embedding id {id} out of range for vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise choice: row `r` comes from `on` where `mask[r]`, else from `off`.
    pub fn select_rows(&mut self, mask: Rc<Vec<bool>>, on: Var, off: Var) -> Result<Var> {
        self.same_shape("select_rows", on, off)?;
        let (ton, toff) = (self.value(on), self.value(off));
        if ton.rows() != mask.len() {
            return Err(Error::shape("select_rows", ton.shape(), &[mask.len()]));
        }
        let c = ton.cols();
        let mut data = Vec::with_capacity(ton.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { ton.row(r) } else { toff.row(r) });
        }
        let out = Tensor::new(ton.shape().to_vec(), data)?;
        debug_assert_eq!(out.cols(), c);
        let rg = self.rg(on) || self.rg(off);
        Ok(self.push(out, Op::Select { mask, on, off }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---------------------------------------------------------------------
    // Nonlinearities
    // ---------------------------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        if c > 0 {
            data.chunks_mut(c).for_each(softmax_in_place);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Identity forward; negates the upstream gradient on the way back.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        let rg = self.rg(a);
        self.push(out, Op::GradReverse(a), rg)
    }

    /// Inverted dropout. In eval mode, or at rate 0, returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    // ---------------------------------------------------------------------
    // Losses and attention
    // ---------------------------------------------------------------------

    /// Weighted token-level cross entropy from unnormalized scores:
    /// `Σ_i w_i · (logsumexp(z_i) − z_i[target_i])`. Rows with zero weight
    /// are skipped entirely and receive exactly zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows || weights.len() != rows || t.shape().len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                t.shape(),
                &[targets.len(), weights.len()],
            ));
        }
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            if targets[r] >= c {
                return Err(Error::Data(format!(
                    "target id {} out of range for {c} classes",
                    targets[r]
                )));
            }
            let z = t.row(r);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += weights[r] * (lse - z[targets[r]]);
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(z) {
                *p = (v - max).exp() / sum;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Softmax over time of per-step scores `[T*B, 1]` (time-major), one
    /// distribution per batch column. Positions with `mask == false` get
    /// weight exactly 0.
    pub fn time_softmax(&mut self, scores: Var, mask: Rc<Vec<bool>>, batch: usize) -> Result<Var> {
        let t = self.value(scores);
        if t.cols() != 1 || t.rows() != mask.len() || batch == 0 || !mask.len().is_multiple_of(batch) {
            return Err(Error::shape("time_softmax", t.shape(), &[mask.len(), batch]));
        }
        let steps = mask.len() / batch;
        let s = t.data();
        let mut alpha = vec![0.0; s.len()];
        for b in 0..batch {
            let idx = (0..steps).map(|k| k * batch + b).filter(|&i| mask[i]);
            let max = idx.clone().map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let sum: f64 = idx.clone().map(|i| (s[i] - max).exp()).sum();
            for i in idx {
                alpha[i] = (s[i] - max).exp() / sum;
            }
        }
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::new(vec![mask.len(), 1], alpha)?,
            Op::TimeSoftmax { scores, mask, batch },
            rg,
        ))
    }

    /// `c_b = Σ_t alpha[t,b] · h[t,b]` over unmasked steps; `h` is `[T*B, D]`
    /// time-major, the result `[B, D]`.
    pub fn time_pool(&mut self, alpha: Var, h: Var, mask: Rc<Vec<bool>>, batch: usize) -> Result<Var> {
        let (ta, th) = (self.value(alpha), self.value(h));
        if ta.cols() != 1
            || ta.rows() != th.rows()
            || th.rows() != mask.len()
            || batch == 0
            || !mask.len().is_multiple_of(batch)
        {
            return Err(Error::shape("time_pool", ta.shape(), th.shape()));
        }
        let d = th.cols();
        let mut out = vec![0.0; batch * d];
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let b = i % batch;
            let a = ta.data()[i];
            out[b * d..(b + 1) * d]
                .iter_mut()
                .zip(th.row(i))
                .for_each(|(o, v)| *o += a * v);
        }
        let rg = self.rg(alpha) || self.rg(h);
        Ok(self.push(
            Tensor::new(vec![batch, d], out)?,
            Op::TimePool { alpha, h, mask, batch },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradient of
    /// every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = accumulate(&mut self.leaf_grads[i], g.len());
                slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let len = |v: Var| nodes[v.0].value.len();
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                accumulate(&mut grads[$v.index()], nodes[$v.index()].value.len())
            };
        }
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let ga = acc!(a);
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), 1.0, ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let gb = acc!(b);
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc!(v).iter_mut().zip(g).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc!(a).iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
                if wants(*b) {
                    acc!(b).iter_mut().zip(g).for_each(|(s, x)| *s -= x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(tb.data()))
                        .for_each(|(s, (x, y))| *s += x * y);
                }
                if wants(*b) {
                    acc!(b)
                        .iter_mut()
                        .zip(g.iter().zip(ta.data()))
                        .for_each(|(s, (x, y))| *s += x * y);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc!(a).iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
                if wants(*row) {
                    let n = len(*row);
                    let gr = acc!(row);
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    acc!(a).iter_mut().zip(g).for_each(|(s, x)| *s += x * f);
                }
            }
            Op::MulConst(a, m) => {
                if wants(*a) {
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(m.iter()))
                        .for_each(|(s, (x, k))| *s += x * k);
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(out.data()))
                        .for_each(|(s, (x, y))| *s += x * y * (1.0 - y));
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(out.data()))
                        .for_each(|(s, (x, y))| *s += x * (1.0 - y * y));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let c = out.cols();
                    let ga = acc!(a);
                    for ((gs, ys), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gs.iter().zip(ys).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in dst.iter_mut().zip(gs).zip(ys) {
                            *d += y * (x - dot);
                        }
                    }
                }
            }
            Op::GradReverse(a) => {
                if wants(*a) {
                    acc!(a).iter_mut().zip(g).for_each(|(s, x)| *s -= x);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(*p) {
                        let gp = acc!(p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, x)| *s += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let full = nodes[a.0].value.cols();
                    let w = out.cols();
                    let ga = acc!(a);
                    for (r, src) in g.chunks(w).enumerate() {
                        ga[r * full + start..r * full + start + w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let c = out.cols();
                    let ga = acc!(a);
                    ga[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, x)| *s += x);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(*p);
                    if wants(*p) {
                        acc!(p)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(s, x)| *s += x);
                    }
                    offset += n;
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = out.cols();
                    let gt = acc!(table);
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Select { mask, on, off } => {
                let c = out.cols();
                for (v, want) in [(on, true), (off, false)] {
                    if wants(*v) {
                        let gv = acc!(v);
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                gv[r * c..(r + 1) * c]
                                    .iter_mut()
                                    .zip(&g[r * c..(r + 1) * c])
                                    .for_each(|(s, x)| *s += x);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc!(a).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let c = nodes[logits.0].value.cols();
                    let gl = acc!(logits);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        let row = &mut gl[r * c..(r + 1) * c];
                        for (j, s) in row.iter_mut().enumerate() {
                            let delta = if j == t { 1.0 } else { 0.0 };
                            *s += scale * (probs[r * c + j] - delta);
                        }
                    }
                }
            }
            Op::TimeSoftmax { scores, mask, batch } => {
                if wants(*scores) {
                    let steps = mask.len() / batch;
                    let alpha = out.data();
                    let gs = acc!(scores);
                    for b in 0..*batch {
                        let idx = (0..steps).map(|k| k * batch + b).filter(|&i| mask[i]);
                        let dot: f64 = idx.clone().map(|i| alpha[i] * g[i]).sum();
                        for i in idx {
                            gs[i] += alpha[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::TimePool { alpha, h, mask, batch } => {
                let (ta, th) = (&nodes[alpha.0].value, &nodes[h.0].value);
                let d = th.cols();
                if wants(*alpha) {
                    let ga = acc!(alpha);
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            let b = i % batch;
                            ga[i] += th
                                .row(i)
                                .iter()
                                .zip(&g[b * d..(b + 1) * d])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
                if wants(*h) {
                    let gh = acc!(h);
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            let b = i % batch;
                            let a = ta.data()[i];
                            gh[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g[b * d..(b + 1) * d])
                                .for_each(|(s, x)| *s += a * x);
                        }
                    }
                }
            }
        }
    }
}

/// In-place numerically stable softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
