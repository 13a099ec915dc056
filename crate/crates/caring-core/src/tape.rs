//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A `Tape` records one forward computation eagerly (values are computed at
//! record time) and replays it backwards to accumulate gradients. Tapes are
//! cheap, single-writer, and dropped after each optimization step; model
//! parameters live outside and are registered as leaves per pass.
//!
//! The op set is deliberately small: dense-layer algebra, the elementwise
//! functions the models need, and the row/column plumbing used to assemble
//! flow inputs. `leaky_relu_grad` exists so a layer Jacobian entry can itself
//! be built as a tape expression; its derivative is zero almost everywhere,
//! which is exactly what the backward pass implements.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn_acc, Tensor};

use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    stamp: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x · wᵀ (+ b broadcast over rows)
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Exp(usize),
    Softplus(usize),
    /// ln |x|
    LnAbs(usize),
    Square(usize),
    LeakyRelu(usize, f64),
    /// Pointwise derivative of leaky_relu; treated as locally constant.
    LeakyReluGrad(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize, len: usize },
    Transpose(usize),
    BroadcastRows(usize),
    GatherRows { a: usize, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    stamp: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by the vars of the pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    stamp: u64,
}

impl Gradients {
    /// Gradient for `v`; unreached nodes yield zeros of the right shape.
    pub fn take(&mut self, v: Var) -> Tensor {
        assert_eq!(v.stamp, self.stamp, "var from another tape");
        self.grads[v.index]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone()))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.stamp, self.stamp, "var from another tape");
        self.grads[v.index].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(128),
            stamp: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.stamp, self.stamp, "var from another tape");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { index: self.nodes.len() - 1, stamp: self.stamp }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.stamp, self.stamp, "var from another tape");
        v.index
    }

    /// Register an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values that will never need a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xi, wi) = (self.check(x), self.check(w));
        let bi = b.map(|b| self.check(b));
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        assert_eq!(
            xv.cols(),
            wv.cols(),
            "linear: input extent {} vs weight in-extent {}",
            xv.cols(),
            wv.cols()
        );
        let mut out = Tensor::zeros(vec![xv.rows(), wv.rows()]);
        matmul_nt(xv, wv, &mut out);
        if let Some(bi) = bi {
            let bv = &self.nodes[bi].value;
            assert_eq!(bv.len(), wv.rows(), "linear: bias extent");
            let cols = out.cols();
            let bd = bv.data().to_vec();
            for row in out.data_mut().chunks_exact_mut(cols) {
                for (o, b) in row.iter_mut().zip(&bd) {
                    *o += b;
                }
            }
        }
        self.push(out, Op::Linear { x: xi, w: wi, b: bi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let v = self.nodes[ai].value.zip(&self.nodes[bi].value, |x, y| x + y);
        self.push(v, Op::Add(ai, bi))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let v = self.nodes[ai].value.zip(&self.nodes[bi].value, |x, y| x - y);
        self.push(v, Op::Sub(ai, bi))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let v = self.nodes[ai].value.zip(&self.nodes[bi].value, |x, y| x * y);
        self.push(v, Op::Mul(ai, bi))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| -x);
        self.push(v, Op::Neg(ai))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| k * x);
        self.push(v, Op::Scale(ai, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| x + k);
        self.push(v, Op::AddScalar(ai, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(f64::exp);
        self.push(v, Op::Exp(ai))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(crate::stats::softplus);
        self.push(v, Op::Softplus(ai))
    }

    pub fn ln_abs(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| x.abs().ln());
        self.push(v, Op::LnAbs(ai))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| x * x);
        self.push(v, Op::Square(ai))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(ai, slope))
    }

    /// Pointwise σ'(x) for leaky_relu: 1 for x ≥ 0, `slope` otherwise.
    /// Constant under differentiation (σ'' = 0 almost everywhere).
    pub fn leaky_relu_grad(&mut self, a: Var, slope: f64) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| if x >= 0.0 { 1.0 } else { slope });
        self.push(v, Op::LeakyReluGrad(ai))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ai = self.check(a);
        let v = self.nodes[ai].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(ai, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let s: f64 = self.nodes[ai].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(ai))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let rows = self.nodes[idx[0]].value.rows();
        let total: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).collect::<Vec<_>>().iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                let t = &self.nodes[i].value;
                assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor::new(vec![rows, total], data), Op::ConcatCols(idx))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ai = self.check(a);
        let t = &self.nodes[ai].value;
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Tensor::new(vec![rows, len], data), Op::SliceCols { a: ai, start, len })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let t = &self.nodes[ai].value;
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = t.data()[r * cols + c];
            }
        }
        self.push(Tensor::new(vec![cols, rows], data), Op::Transpose(ai))
    }

    /// Repeat a single-row tensor `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let ai = self.check(a);
        let t = &self.nodes[ai].value;
        assert_eq!(t.rows(), 1, "broadcast_rows expects a single row");
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(t.row(0));
        }
        self.push(Tensor::new(vec![rows, cols], data), Op::BroadcastRows(ai))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let ai = self.check(a);
        let t = &self.nodes[ai].value;
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            data.extend_from_slice(t.row(r));
        }
        self.push(
            Tensor::new(vec![indices.len(), cols], data),
            Op::GatherRows { a: ai, indices: indices.to_vec() },
        )
    }

    /// Reverse pass from a scalar loss. Fills gradients for every node that
    /// `loss` depends on; anything else reads back as zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.stamp != self.stamp || loss.index >= self.nodes.len() {
            return Err(CoreError::Usage("backward: loss is not on this tape".into()));
        }
        if !self.nodes[loss.index].value.is_scalar() {
            return Err(CoreError::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            stamp: self.stamp,
        })
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Tensor>],
        idx: usize,
    ) -> &'a mut Tensor {
        if grads[idx].is_none() {
            grads[idx] = Some(Tensor::zeros(self.nodes[idx].value.shape().to_vec()));
        }
        grads[idx].as_mut().unwrap()
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::LeakyReluGrad(_) => {}
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                {
                    // dX += g · W
                    let mut dx = Tensor::zeros(vec![g.rows(), wv.cols()]);
                    matmul_nn(g, wv, &mut dx);
                    let slot = self.grad_slot(grads, *x);
                    for (o, v) in slot.data_mut().iter_mut().zip(dx.data()) {
                        *o += v;
                    }
                }
                {
                    // dW += gᵀ · X
                    let slot = self.grad_slot(grads, *w);
                    matmul_tn_acc(g, xv, slot);
                }
                if let Some(b) = b {
                    let cols = g.cols();
                    let slot = self.grad_slot(grads, *b);
                    for row in g.data().chunks_exact(cols) {
                        for (o, v) in slot.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for idx in [a, b] {
                    let slot = self.grad_slot(grads, *idx);
                    for (o, v) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                let slot = self.grad_slot(grads, *a);
                for (o, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
                let slot = self.grad_slot(grads, *b);
                for (o, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.nodes[b].value.data().to_vec();
                let av = self.nodes[a].value.data().to_vec();
                let slot = self.grad_slot(grads, a);
                for ((o, v), y) in slot.data_mut().iter_mut().zip(g.data()).zip(&bv) {
                    *o += v * y;
                }
                let slot = self.grad_slot(grads, b);
                for ((o, v), x) in slot.data_mut().iter_mut().zip(g.data()).zip(&av) {
                    *o += v * x;
                }
            }
            Op::Neg(a) => {
                let slot = self.grad_slot(grads, *a);
                for (o, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *o -= v;
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                let slot = self.grad_slot(grads, *a);
                for (o, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *o += k * v;
                }
            }
            Op::AddScalar(a, _) => {
                let slot = self.grad_slot(grads, *a);
                for (o, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            Op::Exp(a) => {
                let vals = self.nodes[i].value.data().to_vec();
                let slot = self.grad_slot(grads, *a);
                for ((o, v), e) in slot.data_mut().iter_mut().zip(g.data()).zip(&vals) {
                    *o += v * e;
                }
            }
            Op::Softplus(a) => {
                let xs = self.nodes[*a].value.data().to_vec();
                let slot = self.grad_slot(grads, *a);
                for ((o, v), x) in slot.data_mut().iter_mut().zip(g.data()).zip(&xs) {
                    *o += v / (1.0 + (-x).exp());
                }
            }
            Op::LnAbs(a) => {
                let xs = self.nodes[*a].value.data().to_vec();
                let slot = self.grad_slot(grads, *a);
                for ((o, v), x) in slot.data_mut().iter_mut().zip(g.data()).zip(&xs) {
                    *o += v / x;
                }
            }
            Op::Square(a) => {
                let xs = self.nodes[*a].value.data().to_vec();
                let slot = self.grad_slot(grads, *a);
                for ((o, v), x) in slot.data_mut().iter_mut().zip(g.data()).zip(&xs) {
                    *o += 2.0 * v * x;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let xs = self.nodes[*a].value.data().to_vec();
                let slot = self.grad_slot(grads, *a);
                for ((o, v), x) in slot.data_mut().iter_mut().zip(g.data()).zip(&xs) {
                    *o += v * if *x >= 0.0 { 1.0 } else { slope };
                }
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xs = self.nodes[*a].value.data().to_vec();
                let slot = self.grad_slot(grads, *a);
                for ((o, v), x) in slot.data_mut().iter_mut().zip(g.data()).zip(&xs) {
                    if *x > lo && *x < hi {
                        *o += v;
                    }
                }
            }
            Op::SumAll(a) => {
                let gs = g.scalar_value();
                let slot = self.grad_slot(grads, *a);
                for o in slot.data_mut() {
                    *o += gs;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
                let rows = g.rows();
                let total = g.cols();
                for (pi, (&p, &w)) in parts.iter().zip(&widths).enumerate() {
                    let offset: usize = widths[..pi].iter().sum();
                    let slot = self.grad_slot(grads, p);
                    for r in 0..rows {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        let dst = &mut slot.data_mut()[r * w..(r + 1) * w];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let (start, len) = (*start, *len);
                let cols = self.nodes[*a].value.cols();
                let slot = self.grad_slot(grads, *a);
                for (r, row) in g.data().chunks_exact(len).enumerate() {
                    let dst = &mut slot.data_mut()[r * cols + start..r * cols + start + len];
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::Transpose(a) => {
                let (rows, cols) = (g.rows(), g.cols());
                let slot = self.grad_slot(grads, *a);
                for r in 0..rows {
                    for c in 0..cols {
                        slot.data_mut()[c * rows + r] += g.data()[r * cols + c];
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let cols = g.cols();
                let slot = self.grad_slot(grads, *a);
                for row in g.data().chunks_exact(cols) {
                    for (o, v) in slot.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows { a, indices } => {
                let indices = indices.clone();
                let cols = g.cols();
                let slot = self.grad_slot(grads, *a);
                for (&src_row, row) in indices.iter().zip(g.data().chunks_exact(cols)) {
                    let dst = &mut slot.data_mut()[src_row * cols..(src_row + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
    }
}
