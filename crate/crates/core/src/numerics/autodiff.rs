//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] owns a tape of primitive operations. Every [`Var`] produced
//! from a recording graph remembers its tape node; [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every parameter leaf. A
//! graph built with [`Graph::no_grad`] records nothing, so intermediates are
//! dropped as soon as their `Var`s go out of scope.
//!
//! Binary ops broadcast the right operand only: same shape, a `[cols]`
//! vector against a `[rows, cols]` matrix, or a scalar against anything.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops;
use std::rc::Rc;

use super::param::{Gradients, Param, ParamId};
use super::pwq;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

type TapeRef = Rc<RefCell<Tape>>;
type In = Option<usize>;

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

struct Node {
    op: Op,
    len: usize,
    param: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row(usize),
    Scalar,
}

impl Bcast {
    fn of(a: &Tensor, b: &Tensor) -> Self {
        if a.shape() == b.shape() {
            Bcast::Same
        } else if b.len() == 1 && b.rank() <= 1 {
            Bcast::Scalar
        } else if a.rank() == 2 && b.rank() == 1 && b.len() == a.cols() {
            Bcast::Row(a.cols())
        } else {
            panic!("incompatible shapes for broadcast: {:?} vs {:?}", a.shape(), b.shape());
        }
    }

    #[inline]
    fn idx(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row(c) => i % c,
            Bcast::Scalar => 0,
        }
    }
}

enum Op {
    Leaf,
    Add(In, In, Bcast),
    Sub(In, In, Bcast),
    Mul { a: In, b: In, bc: Bcast, av: Rc<Tensor>, bv: Rc<Tensor> },
    Div { a: In, b: In, bc: Bcast, bv: Rc<Tensor>, out: Rc<Tensor> },
    Scale(usize, f64),
    Exp(usize, Rc<Tensor>),
    Ln(usize, Rc<Tensor>),
    Tanh(usize, Rc<Tensor>),
    Square(usize, Rc<Tensor>),
    Abs(usize, Rc<Tensor>),
    Clamp(usize, Rc<Tensor>, f64, f64),
    MatMul { a: In, b: In, av: Rc<Tensor>, bv: Rc<Tensor> },
    Transpose(usize, usize, usize),
    SumAll(usize, usize),
    SumCols(usize, usize),
    SumRows(usize, usize),
    SliceCols { a: usize, cols: usize, start: usize, end: usize },
    ConcatCols { parts: Vec<(In, usize)>, total: usize },
    Reshape(usize),
    Inverse(usize, Rc<Tensor>),
    Pwq { kind: pwq::Kind, x: In, v: In, xv: Rc<Tensor>, vv: Rc<Tensor>, cutoff: f64 },
}

/// A value flowing through a [`Graph`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
    tape: Option<TapeRef>,
}

/// Recording context for one loss evaluation.
pub struct Graph {
    tape: Option<TapeRef>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Self { tape: Some(Rc::new(RefCell::new(Tape::default()))) }
    }

    /// A graph that only evaluates.
    pub fn no_grad() -> Self {
        Self { tape: None }
    }

    pub fn is_recording(&self) -> bool {
        self.tape.is_some()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.as_ref().map_or(0, |t| t.borrow().nodes.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice reuses the node.
    pub fn param(&self, p: &Param) -> Var {
        let Some(tape) = &self.tape else {
            return Var { value: Rc::new(p.value.clone()), node: None, tape: None };
        };
        let mut t = tape.borrow_mut();
        if let Some(&id) = t.params.get(&p.id()) {
            drop(t);
            return Var { value: Rc::new(p.value.clone()), node: Some(id), tape: Some(tape.clone()) };
        }
        let id = t.nodes.len();
        t.nodes.push(Node { op: Op::Leaf, len: p.len(), param: Some(p.id()) });
        t.params.insert(p.id(), id);
        Var { value: Rc::new(p.value.clone()), node: Some(id), tape: Some(tape.clone()) }
    }

    /// A differentiable leaf that is not a parameter (e.g. an input point).
    pub fn variable(&self, value: Tensor) -> Var {
        let Some(tape) = &self.tape else {
            return Var { value: Rc::new(value), node: None, tape: None };
        };
        let mut t = tape.borrow_mut();
        let id = t.nodes.len();
        t.nodes.push(Node { op: Op::Leaf, len: value.len(), param: None });
        Var { value: Rc::new(value), node: Some(id), tape: Some(tape.clone()) }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        Var { value: Rc::new(value), node: None, tape: self.tape.clone() }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter bound on this graph gets an entry, zero when the loss
    /// does not depend on it.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::NotScalar(loss.value.shape().to_vec()));
        }
        if !loss.value.all_finite() {
            return Err(Error::NonFinite(format!("loss = {}", loss.value.to_scalar())));
        }
        let (Some(tape), Some(root)) = (&self.tape, loss.node) else {
            return Err(Error::NotOnTape);
        };
        if let Some(lt) = &loss.tape {
            if !Rc::ptr_eq(lt, tape) {
                return Err(Error::NotOnTape);
            }
        }
        let t = tape.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                if let Op::Leaf = t.nodes[i].op {
                    let z = vec![0.0; t.nodes[i].len];
                    store_leaf(&mut out, &t.nodes[i], i, z);
                }
                continue;
            };
            backprop(&t.nodes[i], i, g, &mut grads, &mut out);
        }
        // Parameters bound after the loss was formed still get a zero entry.
        for node in t.nodes.iter().skip(root + 1) {
            if let (Op::Leaf, Some(pid)) = (&node.op, node.param) {
                out.params.entry(pid).or_insert_with(|| Tensor::zeros(&[node.len]));
            }
        }
        Ok(out)
    }
}

fn store_leaf(out: &mut Gradients, node: &Node, id: usize, g: Vec<f64>) {
    match node.param {
        Some(pid) => {
            out.params.insert(pid, Tensor::from_parts(vec![g.len()], g));
        }
        None => {
            out.leaves.insert(id, Tensor::from_parts(vec![g.len()], g));
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn reduce_into(dst: &mut [f64], bc: Bcast, src: impl Iterator<Item = f64>) {
    match bc {
        Bcast::Same => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        Bcast::Row(c) => {
            for (i, s) in src.enumerate() {
                dst[i % c] += s;
            }
        }
        Bcast::Scalar => dst[0] += src.sum::<f64>(),
    }
}

fn backprop(node: &Node, id: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
    match &node.op {
        Op::Leaf => store_leaf(out, node, id, g),
        Op::Add(a, b, bc) => {
            if let Some(b) = *b {
                let blen = bc_len(*bc, g.len());
                reduce_into(slot(grads, b, blen), *bc, g.iter().copied());
            }
            if let Some(a) = *a {
                add_into(slot(grads, a, g.len()), &g);
            }
        }
        Op::Sub(a, b, bc) => {
            if let Some(b) = *b {
                let blen = bc_len(*bc, g.len());
                reduce_into(slot(grads, b, blen), *bc, g.iter().map(|x| -x));
            }
            if let Some(a) = *a {
                add_into(slot(grads, a, g.len()), &g);
            }
        }
        Op::Mul { a, b, bc, av, bv } => {
            if let Some(a) = *a {
                let bd = bv.data();
                let dst = slot(grads, a, g.len());
                for (i, (d, gi)) in dst.iter_mut().zip(&g).enumerate() {
                    *d += gi * bd[bc.idx(i)];
                }
            }
            if let Some(b) = *b {
                let ad = av.data();
                reduce_into(slot(grads, b, bv.len()), *bc, g.iter().zip(ad).map(|(gi, ai)| gi * ai));
            }
        }
        Op::Div { a, b, bc, bv, out: o } => {
            let bd = bv.data();
            if let Some(a) = *a {
                let dst = slot(grads, a, g.len());
                for (i, (d, gi)) in dst.iter_mut().zip(&g).enumerate() {
                    *d += gi / bd[bc.idx(i)];
                }
            }
            if let Some(b) = *b {
                let od = o.data();
                let it = g.iter().enumerate().map(|(i, gi)| -gi * od[i] / bd[bc.idx(i)]);
                reduce_into(slot(grads, b, bv.len()), *bc, it);
            }
        }
        Op::Scale(a, c) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(&g).for_each(|(d, gi)| *d += c * gi);
        }
        Op::Exp(a, o) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(&g).zip(o.data()).for_each(|((d, gi), oi)| *d += gi * oi);
        }
        Op::Ln(a, av) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(&g).zip(av.data()).for_each(|((d, gi), ai)| *d += gi / ai);
        }
        Op::Tanh(a, o) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(&g).zip(o.data()).for_each(|((d, gi), oi)| *d += gi * (1.0 - oi * oi));
        }
        Op::Square(a, av) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(&g).zip(av.data()).for_each(|((d, gi), ai)| *d += 2.0 * gi * ai);
        }
        Op::Abs(a, av) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(&g).zip(av.data()).for_each(|((d, gi), ai)| *d += gi * ai.signum());
        }
        Op::Clamp(a, av, lo, hi) => {
            let dst = slot(grads, *a, g.len());
            for ((d, gi), ai) in dst.iter_mut().zip(&g).zip(av.data()) {
                if *ai >= *lo && *ai <= *hi {
                    *d += gi;
                }
            }
        }
        Op::MatMul { a, b, av, bv } => {
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(a) = *a {
                // dA = G * B^T
                gemm(m, n, k, &g, false, bv.data(), true, slot(grads, a, m * k), true);
            }
            if let Some(b) = *b {
                // dB = A^T * G
                gemm(k, m, n, av.data(), true, &g, false, slot(grads, b, k * n), true);
            }
        }
        Op::Transpose(a, rows, cols) => {
            // g is [cols, rows]; input is [rows, cols]
            let dst = slot(grads, *a, rows * cols);
            for i in 0..*rows {
                for j in 0..*cols {
                    dst[i * cols + j] += g[j * rows + i];
                }
            }
        }
        Op::SumAll(a, len) => {
            let g0 = g[0];
            slot(grads, *a, *len).iter_mut().for_each(|d| *d += g0);
        }
        Op::SumCols(a, cols) => {
            let rows = g.len();
            let dst = slot(grads, *a, rows * cols);
            for i in 0..rows {
                let gi = g[i];
                dst[i * cols..(i + 1) * cols].iter_mut().for_each(|d| *d += gi);
            }
        }
        Op::SumRows(a, rows) => {
            let cols = g.len();
            let dst = slot(grads, *a, rows * cols);
            for i in 0..*rows {
                dst[i * cols..(i + 1) * cols].iter_mut().zip(&g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::SliceCols { a, cols, start, end } => {
            let w = end - start;
            let rows = if w == 0 { 0 } else { g.len() / w };
            let dst = slot(grads, *a, rows * cols);
            for i in 0..rows {
                for j in 0..w {
                    dst[i * cols + start + j] += g[i * w + j];
                }
            }
        }
        Op::ConcatCols { parts, total } => {
            let rows = if *total == 0 { 0 } else { g.len() / total };
            let mut off = 0;
            for (p, w) in parts {
                if let Some(p) = *p {
                    let dst = slot(grads, p, rows * w);
                    for i in 0..rows {
                        for j in 0..*w {
                            dst[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Reshape(a) => add_into(slot(grads, *a, g.len()), &g),
        Op::Inverse(a, inv) => {
            // d(A^-1) = -A^-1 dA A^-1  =>  dA = -A^-T G A^-T
            let n = inv.rows();
            let mut tmp = vec![0.0; n * n];
            gemm(n, n, n, inv.data(), true, &g, false, &mut tmp, false);
            let mut res = vec![0.0; n * n];
            gemm(n, n, n, &tmp, false, inv.data(), true, &mut res, false);
            let dst = slot(grads, *a, n * n);
            dst.iter_mut().zip(&res).for_each(|(d, r)| *d -= r);
        }
        Op::Pwq { kind, x, v, xv, vv, cutoff } => {
            let (gx, gv) = pwq::backward(*kind, xv, vv, *cutoff, &g, x.is_some(), v.is_some());
            if let (Some(x), Some(gx)) = (*x, gx) {
                add_into(slot(grads, x, xv.len()), &gx);
            }
            if let (Some(v), Some(gv)) = (*v, gv) {
                add_into(slot(grads, v, vv.len()), &gv);
            }
        }
    }
}

fn bc_len(bc: Bcast, full: usize) -> usize {
    match bc {
        Bcast::Same => full,
        Bcast::Row(c) => c,
        Bcast::Scalar => 1,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value.to_scalar()
    }

    /// True when this var is recorded and can carry a gradient.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Var {
        Var { value: self.value.clone(), node: None, tape: self.tape.clone() }
    }

    /// Gradient of this leaf var, if it is a non-parameter leaf of the graph.
    pub fn grad<'g>(&self, grads: &'g Gradients) -> Option<&'g Tensor> {
        self.node.and_then(|id| grads.leaves.get(&id))
    }

    fn unary(&self, value: Tensor, op: impl FnOnce(usize) -> Op) -> Var {
        match (&self.tape, self.node) {
            (Some(tape), Some(id)) => push(tape, value, op(id)),
            _ => Var { value: Rc::new(value), node: None, tape: self.tape.clone() },
        }
    }

    fn binary(&self, other: &Var, value: Tensor, op: impl FnOnce(In, In) -> Op) -> Var {
        let tape = self.tape.clone().or_else(|| other.tape.clone());
        if self.node.is_none() && other.node.is_none() {
            return Var { value: Rc::new(value), node: None, tape };
        }
        let tape = tape.expect("recorded var without a tape");
        push(&tape, value, op(self.node, other.node))
    }

    fn zip_bcast(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Bcast) {
        let bc = Bcast::of(&self.value, &other.value);
        let b = other.value.data();
        let data = self.value.data().iter().enumerate().map(|(i, &a)| f(a, b[bc.idx(i)])).collect();
        (Tensor::from_parts(self.value.shape().to_vec(), data), bc)
    }

    pub fn add(&self, other: &Var) -> Var {
        let (v, bc) = self.zip_bcast(other, |a, b| a + b);
        self.binary(other, v, |a, b| Op::Add(a, b, bc))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (v, bc) = self.zip_bcast(other, |a, b| a - b);
        self.binary(other, v, |a, b| Op::Sub(a, b, bc))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (v, bc) = self.zip_bcast(other, |a, b| a * b);
        let (av, bv) = (self.value.clone(), other.value.clone());
        self.binary(other, v, |a, b| Op::Mul { a, b, bc, av, bv })
    }

    pub fn div(&self, other: &Var) -> Var {
        let (v, bc) = self.zip_bcast(other, |a, b| a / b);
        let bv = other.value.clone();
        let out = Rc::new(v.clone());
        self.binary(other, v, |a, b| Op::Div { a, b, bc, bv, out })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.value.map(|x| c * x), |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(self.value.map(|x| x + c), |a| Op::Scale(a, 1.0))
    }

    pub fn exp(&self) -> Var {
        let v = self.value.map(f64::exp);
        let o = Rc::new(v.clone());
        self.unary(v, |a| Op::Exp(a, o))
    }

    pub fn ln(&self) -> Var {
        let av = self.value.clone();
        self.unary(self.value.map(f64::ln), |a| Op::Ln(a, av))
    }

    pub fn tanh(&self) -> Var {
        let v = self.value.map(f64::tanh);
        let o = Rc::new(v.clone());
        self.unary(v, |a| Op::Tanh(a, o))
    }

    pub fn square(&self) -> Var {
        let av = self.value.clone();
        self.unary(self.value.map(|x| x * x), |a| Op::Square(a, av))
    }

    pub fn abs(&self) -> Var {
        let av = self.value.clone();
        self.unary(self.value.map(f64::abs), |a| Op::Abs(a, av))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let av = self.value.clone();
        self.unary(self.value.map(|x| x.clamp(lo, hi)), |a| Op::Clamp(a, av, lo, hi))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.value.matmul(&other.value);
        let (av, bv) = (self.value.clone(), other.value.clone());
        self.binary(other, v, |a, b| Op::MatMul { a, b, av, bv })
    }

    pub fn transpose(&self) -> Var {
        let (r, c) = (self.rows(), self.cols());
        self.unary(self.value.transpose(), |a| Op::Transpose(a, r, c))
    }

    /// Sum of all entries, as a rank-0 var.
    pub fn sum(&self) -> Var {
        let len = self.value.len();
        self.unary(Tensor::scalar(self.value.sum()), |a| Op::SumAll(a, len))
    }

    pub fn mean(&self) -> Var {
        let n = self.value.len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Row sums of a matrix: `[rows, cols] -> [rows]`.
    pub fn sum_cols(&self) -> Var {
        let (r, c) = (self.rows(), self.cols());
        let d = self.value.data();
        let v: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        self.unary(Tensor::from_parts(vec![r], v), |a| Op::SumCols(a, c))
    }

    /// Column sums of a matrix: `[rows, cols] -> [cols]`.
    pub fn sum_rows(&self) -> Var {
        let (r, c) = (self.rows(), self.cols());
        let d = self.value.data();
        let mut v = vec![0.0; c];
        for i in 0..r {
            v.iter_mut().zip(&d[i * c..(i + 1) * c]).for_each(|(s, x)| *s += x);
        }
        self.unary(Tensor::from_parts(vec![c], v), |a| Op::SumRows(a, r))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var {
        let cols = self.cols();
        self.unary(self.value.slice_cols(start, end), |a| Op::SliceCols { a, cols, start, end })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows(), rows, "concat row mismatch");
            let w = p.cols();
            let pd = p.data();
            for i in 0..rows {
                data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        let tape = parts.iter().find_map(|p| p.tape.clone());
        if parts.iter().all(|p| p.node.is_none()) {
            return Var { value: Rc::new(value), node: None, tape };
        }
        let specs = parts.iter().map(|p| (p.node, p.cols())).collect();
        push(tape.as_ref().unwrap(), value, Op::ConcatCols { parts: specs, total })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = (*self.value).clone().reshape(shape).expect("reshape size mismatch");
        self.unary(v, Op::Reshape)
    }

    /// Inverse of a square matrix (Gauss-Jordan with partial pivoting).
    pub fn inverse(&self) -> Result<Var> {
        let inv = invert(&self.value)?;
        let o = Rc::new(inv.clone());
        Ok(self.unary(inv, |a| Op::Inverse(a, o)))
    }

    pub(crate) fn pwq(&self, nodes: &Var, kind: pwq::Kind, cutoff: f64) -> Result<Var> {
        let v = pwq::forward(kind, &self.value, &nodes.value, cutoff)?;
        let (xv, vv) = (self.value.clone(), nodes.value.clone());
        Ok(self.binary(nodes, v, |x, v| Op::Pwq { kind, x, v, xv, vv, cutoff }))
    }
}

fn push(tape: &TapeRef, value: Tensor, op: Op) -> Var {
    let mut t = tape.borrow_mut();
    let id = t.nodes.len();
    t.nodes.push(Node { op, len: value.len(), param: None });
    Var { value: Rc::new(value), node: Some(id), tape: Some(tape.clone()) }
}

/// Dense inverse with partial pivoting.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n {
        return Err(Error::Shape(format!("inverse needs a square matrix, got {:?}", a.shape())));
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::identity(n).into_data();
    let scale = m.iter().fold(0.0_f64, |s, x| s.max(x.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[piv * n + col].abs() < 1e-14 * scale {
            return Err(Error::Singular(format!("pivot {col} vanishes")));
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let p = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i * n + col];
            if f != 0.0 {
                for j in 0..n {
                    m[i * n + j] -= f * m[col * n + j];
                    inv[i * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], inv))
}

impl ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl ops::Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
