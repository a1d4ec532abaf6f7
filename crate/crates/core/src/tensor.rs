//! Define-by-run reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation in execution order. Tensors are cheap
//! handles into that tape; calling [`Tape::backward`] walks the recording in
//! exact reverse order and accumulates gradients additively, so a tensor read
//! by several operations receives the sum of all contributions.
//!
//! The tape is rebuilt for every forward pass: the graph topology differs per
//! pass because the sampled neighbourhoods change.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied by [`Tensor::log_clamped`].
pub const LOG_EPS: f64 = 1e-12;

/// Denominator floor used when turning absolute gradient discrepancies into
/// relative ones. Entries whose analytic and numeric magnitudes are both below
/// the floor are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Row-major dense array that lives outside any tape (parameters, data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Array::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows × cols` matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Array::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(vec![n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows of a matrix (first dimension; 1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    /// Selects a subset of columns of a matrix.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                data.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![r, idx.len()],
            data,
        }
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn hcat(&self, other: &Array) -> Result<Self> {
        if self.rows() != other.rows() {
            return Err(Error::shape("Array::hcat", &self.shape, &other.shape));
        }
        let (c1, c2) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.rows() * (c1 + c2));
        for i in 0..self.rows() {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self {
            shape: vec![self.rows(), c1 + c2],
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    AddRow(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Log { x: usize, clamp: Option<f64> },
    Neg(usize),
    LeakyRelu(usize, f64),
    Relu(usize),
    Clamp(usize, f64, f64),
    Reduce {
        x: usize,
        kind: ReduceKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Concat(usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    GatherElements(usize, Vec<usize>),
    Reshape(usize),
    PairwiseSqDist(usize),
    LogSoftmax(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Cloning a tape clones the handle, not the
/// recording.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Records a differentiable leaf.
    pub fn param(&self, a: &Array) -> Tensor {
        self.push(a.shape.clone(), a.data.clone(), Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient is accumulated for it.
    pub fn constant(&self, a: &Array) -> Tensor {
        self.push(a.shape.clone(), a.data.clone(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&Array::scalar(v))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates gradients from a single-element `output` back to every
    /// differentiable node, visiting the recording in exact reverse order.
    pub fn backward(&self, output: &Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::shape("backward", &out.shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += a_ip * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate(grads, nodes, *a, |ga| match bc {
                Broadcast::LeftScalar => ga[0] += g.iter().sum::<f64>(),
                _ => ga.iter_mut().zip(g).for_each(|(d, s)| *d += s),
            });
            accumulate(grads, nodes, *b, |gb| match bc {
                Broadcast::RightScalar => gb[0] += sign * g.iter().sum::<f64>(),
                _ => gb.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s),
            });
        }
        Op::Mul(a, b, bc) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let at = |i: usize| if *bc == Broadcast::LeftScalar { av[0] } else { av[i] };
            let bt = |i: usize| if *bc == Broadcast::RightScalar { bv[0] } else { bv[i] };
            accumulate(grads, nodes, *a, |ga| {
                if *bc == Broadcast::LeftScalar {
                    ga[0] += (0..g.len()).map(|i| g[i] * bt(i)).sum::<f64>();
                } else {
                    (0..g.len()).for_each(|i| ga[i] += g[i] * bt(i));
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                if *bc == Broadcast::RightScalar {
                    gb[0] += (0..g.len()).map(|i| g[i] * at(i)).sum::<f64>();
                } else {
                    (0..g.len()).for_each(|i| gb[i] += g[i] * at(i));
                }
            });
        }
        Op::AddRow(x, b) => {
            let d = nodes[*b].value.len();
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            accumulate(grads, nodes, *b, |gb| {
                for (i, s) in g.iter().enumerate() {
                    gb[i % d] += s;
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s));
        }
        Op::Exp(x) => {
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            });
        }
        Op::Log { x, clamp } => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    let v = xv[i];
                    if clamp.is_none_or(|eps| v > eps) {
                        gx[i] += g[i] / v;
                    }
                }
            });
        }
        Op::Neg(x) => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::LeakyRelu(x, slope) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            });
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Clamp(x, lo, hi) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Reduce {
            x,
            kind,
            outer,
            len,
            inner,
            argmax,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for q in 0..inner {
                        let gi = g[o * inner + q];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let w = if *kind == ReduceKind::Mean { gi / len as f64 } else { gi };
                                for r in 0..len {
                                    gx[(o * len + r) * inner + q] += w;
                                }
                            }
                            ReduceKind::Max => {
                                let r = argmax[o * inner + q];
                                gx[(o * len + r) * inner + q] += gi;
                            }
                        }
                    }
                }
            });
        }
        Op::Concat(a, b) => {
            let d1 = nodes[*a].shape[1];
            let d2 = nodes[*b].shape[1];
            let rows = node.shape[0];
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..rows {
                    for c in 0..d1 {
                        ga[i * d1 + c] += g[i * (d1 + d2) + c];
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..rows {
                    for c in 0..d2 {
                        gb[i * d2 + c] += g[i * (d1 + d2) + d1 + c];
                    }
                }
            });
        }
        Op::GatherRows(x, idx) => {
            let d = node.shape[1];
            accumulate(grads, nodes, *x, |gx| {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += g[r * d + c];
                    }
                }
            });
        }
        Op::ScatterAddRows(x, idx) => {
            let d = node.shape[1];
            accumulate(grads, nodes, *x, |gx| {
                for (r, &dst) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[r * d + c] += g[dst * d + c];
                    }
                }
            });
        }
        Op::GatherElements(x, idx) => {
            accumulate(grads, nodes, *x, |gx| {
                for (r, &src) in idx.iter().enumerate() {
                    gx[src] += g[r];
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
        }
        Op::PairwiseSqDist(x) => {
            let (n, d) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            gx[i * d + c] += w * (xv[i * d + c] - xv[j * d + c]);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let (rows, c) = (node.shape[0], node.shape[1]);
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..rows {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        gx[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gs;
                    }
                }
            });
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tensor.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `t`, or `None` when `t` does not
    /// require gradients or the output does not depend on it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape when no
    /// gradient reached `t`.
    pub fn get_or_zeros(&self, t: &Tensor) -> Array {
        let shape = t.shape();
        match self.get(t) {
            Some(g) => Array {
                shape,
                data: g.to_vec(),
            },
            None => Array::zeros(shape),
        }
    }
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value out of the tape.
    pub fn to_array(&self) -> Array {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Array {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Runs `f` on the value without copying it.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.with_values(|v| v[0])
    }

    /// Same value recorded as a constant: gradients stop here.
    pub fn detach(&self) -> Tensor {
        let a = self.to_array();
        self.tape.constant(&a)
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(shape, value, op, rg)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        match s.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &s, &[0, 0])),
        }
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        self.unary(shape, value, op)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let a_ip = a[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    let row = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o += a_ip * bv;
                    }
                }
            }
            out
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(vec![m, n], value, Op::MatMul(self.id, other.id), rg))
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        make: fn(usize, usize, Broadcast) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (shape, value, bc) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let bc = if a.shape == b.shape {
                Broadcast::Same
            } else if b.value.len() == 1 {
                Broadcast::RightScalar
            } else if a.value.len() == 1 {
                Broadcast::LeftScalar
            } else {
                return Err(Error::shape(name, &a.shape, &b.shape));
            };
            let (shape, value) = match bc {
                Broadcast::Same => (
                    a.shape.clone(),
                    a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect(),
                ),
                Broadcast::LeftScalar => (b.shape.clone(), b.value.iter().map(|&y| f(a.value[0], y)).collect()),
                Broadcast::RightScalar => (a.shape.clone(), a.value.iter().map(|&x| f(x, b.value[0])).collect()),
            };
            (shape, value, bc)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, make(self.id, other.id, bc), rg))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Adds a bias row (`[d]` or `[1, d]`) to every row of an `N × d` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2("add_row")?;
        let bshape = bias.shape();
        if bias.numel() != d {
            return Err(Error::shape("add_row", &[n, d], &bshape));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let b = &nodes[bias.id].value;
            x.iter().enumerate().map(|(i, v)| v + b[i % d]).collect()
        };
        let rg = self.tape.requires(&[self.id, bias.id]);
        Ok(self.tape.push(vec![n, d], value, Op::AddRow(self.id, bias.id), rg))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.map(Op::Scale(self.id, c), |v| c * v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(Op::Exp(self.id), f64::exp)
    }

    /// Natural logarithm. Fails on non-positive input.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.with_values(|v| v.iter().copied().find(|x| *x <= 0.0 || x.is_nan())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} is not positive"),
            });
        }
        Ok(self.map(Op::Log { x: self.id, clamp: None }, f64::ln))
    }

    /// Natural logarithm of `max(x, LOG_EPS)`; the clamped region has zero
    /// gradient.
    pub fn log_clamped(&self) -> Tensor {
        self.map(
            Op::Log {
                x: self.id,
                clamp: Some(LOG_EPS),
            },
            |v| v.max(LOG_EPS).ln(),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.map(Op::Neg(self.id), |v| -v)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.map(Op::LeakyRelu(self.id, slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&self) -> Tensor {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(Op::Clamp(self.id, lo, hi), move |v| v.clamp(lo, hi))
    }

    fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Tensor> {
        let shape = self.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, self.numel(), 1, vec![]),
            Some(a) => {
                if a >= shape.len() {
                    return Err(Error::shape("reduce", &shape, &[a]));
                }
                let mut out_shape = shape.clone();
                out_shape.remove(a);
                (
                    shape[..a].iter().product(),
                    shape[a],
                    shape[a + 1..].iter().product(),
                    out_shape,
                )
            }
        };
        if len == 0 {
            return Err(Error::Empty("reduce"));
        }
        let mut argmax = Vec::new();
        let value = self.with_values(|x| {
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for q in 0..inner {
                    let at = |r: usize| x[(o * len + r) * inner + q];
                    match kind {
                        ReduceKind::Sum => out.push((0..len).map(at).sum()),
                        ReduceKind::Mean => out.push((0..len).map(at).sum::<f64>() / len as f64),
                        ReduceKind::Max => {
                            let mut best = 0;
                            for r in 1..len {
                                if at(r) > at(best) {
                                    best = r;
                                }
                            }
                            argmax.push(best);
                            out.push(at(best));
                        }
                    }
                }
            }
            out
        });
        Ok(self.unary(
            out_shape,
            value,
            Op::Reduce {
                x: self.id,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    /// Sum over all elements (`axis = None`) or along one axis.
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, axis)
    }

    /// Maximum; the gradient routes to the first index attaining it.
    pub fn max(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, axis)
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        let (n1, d1) = self.dims2("concat")?;
        let (n2, d2) = other.dims2("concat")?;
        if n1 != n2 {
            return Err(Error::shape("concat", &[n1, d1], &[n2, d2]));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let mut out = Vec::with_capacity(n1 * (d1 + d2));
            for i in 0..n1 {
                out.extend_from_slice(&a[i * d1..(i + 1) * d1]);
                out.extend_from_slice(&b[i * d2..(i + 1) * d2]);
            }
            out
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(vec![n1, d1 + d2], value, Op::Concat(self.id, other.id), rg))
    }

    /// Row selection; gradients scatter-add back to the source rows.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, d) = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let value = self.with_values(|x| {
            let mut out = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                out.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
            out
        });
        Ok(self.unary(vec![idx.len(), d], value, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// Adds row `r` of `self` into row `idx[r]` of an `n`-row zero matrix.
    /// Rows are accumulated in input order.
    pub fn scatter_add_rows(&self, idx: &[usize], n: usize) -> Result<Tensor> {
        let (m, d) = self.dims2("scatter_add_rows")?;
        if idx.len() != m {
            return Err(Error::shape("scatter_add_rows", &[m, d], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let value = self.with_values(|x| {
            let mut out = vec![0.0; n * d];
            for (r, &dst) in idx.iter().enumerate() {
                for c in 0..d {
                    out[dst * d + c] += x[r * d + c];
                }
            }
            out
        });
        Ok(self.unary(vec![n, d], value, Op::ScatterAddRows(self.id, idx.to_vec())))
    }

    /// Picks elements by flat row-major index into a 1-D result.
    pub fn gather_elements(&self, idx: &[usize]) -> Result<Tensor> {
        let len = self.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::Index { index: bad, len });
        }
        let value = self.with_values(|x| idx.iter().map(|&i| x[i]).collect());
        Ok(self.unary(vec![idx.len()], value, Op::GatherElements(self.id, idx.to_vec())))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape(), &shape));
        }
        let value = self.with_values(|x| x.to_vec());
        Ok(self.unary(shape, value, Op::Reshape(self.id)))
    }

    /// `out[i][j] = Σ_c (x[i][c] − x[j][c])²` for an `N × d` input.
    pub fn pairwise_sq_dist(&self) -> Result<Tensor> {
        let (n, d) = self.dims2("pairwise_sq_dist")?;
        if n == 0 || d == 0 {
            return Err(Error::Empty("pairwise_sq_dist"));
        }
        let value = self.with_values(|x| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let mut s = 0.0;
                    for c in 0..d {
                        let diff = x[i * d + c] - x[j * d + c];
                        s += diff * diff;
                    }
                    out[i * n + j] = s;
                    out[j * n + i] = s;
                }
            }
            out
        });
        Ok(self.unary(vec![n, n], value, Op::PairwiseSqDist(self.id)))
    }

    /// Row-wise log-softmax of an `N × C` matrix.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (n, c) = self.dims2("log_softmax")?;
        if c == 0 {
            return Err(Error::Empty("log_softmax"));
        }
        let value = self.with_values(|x| {
            let mut out = Vec::with_capacity(n * c);
            for i in 0..n {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            out
        });
        Ok(self.unary(vec![n, c], value, Op::LogSoftmax(self.id)))
    }
}

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Relative discrepancy between two derivative estimates.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the tape gradient of a scalar function of several inputs against
/// central finite differences with the given step. Every element of every
/// input is perturbed; entries are reported in input order.
pub fn check_gradient_multi<F>(f: F, inputs: &[Array], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |xs: &[Array]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Tensor> = xs.iter().map(|x| tape.constant(x)).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::shape("check_gradient", &out.shape(), &[1]));
        }
        Ok(out.item())
    };

    let tape = Tape::new();
    let vars: Vec<Tensor> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| grads.get_or_zeros(v).into_data())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].numel() {
            let orig = work[k].data[e];
            work[k].data[e] = orig + step;
            let plus = eval(&work)?;
            work[k].data[e] = orig - step;
            let minus = eval(&work)?;
            work[k].data[e] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
    })
}

/// Single-input form of [`check_gradient_multi`].
pub fn check_gradient<F>(f: F, x: &Array, step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    check_gradient_multi(|t, xs| f(t, &xs[0]), std::slice::from_ref(x), step, tol)
}
