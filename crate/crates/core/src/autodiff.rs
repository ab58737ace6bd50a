//! Dense reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tensor`] is an immutable value buffer plus a record of the operation
//! that produced it. Calling [`Tensor::backward`] on a scalar walks the
//! recorded graph once in reverse topological order and accumulates
//! d(loss)/d(leaf) into every leaf created with `requires_grad`.
//!
//! Nodes whose inputs do not require gradients drop their provenance, so
//! inference-only forward passes build no graph at all.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Denominator floor used by [`grad_check`]. Central differences at step
/// 1e-6 carry roughly 1e-10 absolute rounding noise on O(1) losses, so
/// coordinates whose true gradient is near zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: Tensor, b: Tensor, transpose_b: bool },
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    LogSoftmax(Tensor),
    Sum(Tensor),
    BroadcastRows(Tensor),
    Reshape(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::BroadcastRows(a)
            | Op::Reshape(a) => vec![a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Reshape(..) => "reshape",
        }
    }
}

/// Elementwise operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    ScalarMul,
    Relu,
    Exp,
    Log,
}

/// Second operand of an elementwise operation.
#[derive(Clone, Copy)]
pub enum Operand<'a> {
    None,
    Tensor(&'a Tensor),
    Scalar(f64),
}

/// Dispatches a named elementwise op. Binary ops accept either an
/// exact-shape tensor or a scalar; unary ops take no second operand.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    use ElementwiseOp::*;
    match (op, b) {
        (Add, Operand::Tensor(b)) => a.add(b),
        (Add, Operand::Scalar(s)) => Ok(a.add_scalar(s)),
        (Sub, Operand::Tensor(b)) => a.sub(b),
        (Sub, Operand::Scalar(s)) => Ok(a.add_scalar(-s)),
        (Mul, Operand::Tensor(b)) => a.mul(b),
        (Mul | ScalarMul, Operand::Scalar(s)) => Ok(a.scale(s)),
        (Relu, Operand::None) => Ok(a.relu()),
        (Exp, Operand::None) => Ok(a.exp()),
        (Log, Operand::None) => a.log(),
        (op, _) => Err(Error::Contract(format!("operand kind not valid for {op:?}"))),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a leaf tensor. A gradient slot is allocated iff `requires_grad`.
    pub fn new(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        if numel(shape) != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        let grad = requires_grad.then(|| vec![0.0; values.len()]);
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            values,
            requires_grad,
            grad: RefCell::new(grad),
            op: Op::Leaf,
        })))
    }

    /// Leaf without gradient tracking.
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::new(shape, values, false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::constant(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_op(vec![1], vec![value], Op::Leaf)
    }

    fn from_op(shape: Vec<usize>, values: Vec<f64>, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // Drop provenance when nothing upstream needs a gradient.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            shape,
            values,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn numel(&self) -> usize {
        self.0.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Name of the operation that produced this tensor.
    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.values[0]
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if let Some(slot) = self.0.grad.borrow_mut().as_mut() {
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_op(self.0.shape.clone(), self.0.values.clone(), Op::Leaf)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self[m,k] · other[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values(), (k, 1), other.values(), (n, 1), &mut out);
        Ok(Self::from_op(
            vec![m, n],
            out,
            Op::MatMul { a: self.clone(), b: other.clone(), transpose_b: false },
        ))
    }

    /// `self[m,k] · other[n,k]ᵀ`, without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dims disagree: [{m},{k}] x [{n},{k2}]^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values(), (k, 1), other.values(), (1, k), &mut out);
        Ok(Self::from_op(
            vec![m, n],
            out,
            Op::MatMul { a: self.clone(), b: other.clone(), transpose_b: true },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let v = zip_map(self.values(), other.values(), |a, b| a + b);
        Ok(Self::from_op(self.shape().to_vec(), v, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let v = zip_map(self.values(), other.values(), |a, b| a - b);
        Ok(Self::from_op(self.shape().to_vec(), v, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let v = zip_map(self.values(), other.values(), |a, b| a * b);
        Ok(Self::from_op(self.shape().to_vec(), v, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let v = self.values().iter().map(|x| x * s).collect();
        Self::from_op(self.shape().to_vec(), v, Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let v = self.values().iter().map(|x| x + s).collect();
        Self::from_op(self.shape().to_vec(), v, Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.values().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Self::from_op(self.shape().to_vec(), v, Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let v = self.values().iter().map(|x| x.exp()).collect();
        Self::from_op(self.shape().to_vec(), v, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.values().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.values().iter().map(|x| x.ln()).collect();
        Ok(Self::from_op(self.shape().to_vec(), v, Op::Log(self.clone())))
    }

    /// Row-wise log-softmax of a `[b, c]` matrix, stabilized by the row max.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if cols < 2 {
            return Err(Error::Shape(format!("log_softmax needs at least 2 columns, got {cols}")));
        }
        if self.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite input to log_softmax".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for (src, dst) in self.values().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = src.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        Ok(Self::from_op(self.shape().to_vec(), out, Op::LogSoftmax(self.clone())))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.values().iter().sum();
        Self::from_op(vec![1], vec![total], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeats a `[n]` (or `[1, n]`) vector as `rows` rows of a `[rows, n]` matrix.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor> {
        let n = match self.shape() {
            &[n] | &[1, n] => n,
            s => return Err(Error::Shape(format!("broadcast_rows expects a vector, got {s:?}"))),
        };
        if rows == 0 {
            return Err(Error::Shape("broadcast_rows to zero rows".into()));
        }
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.values());
        }
        Ok(Self::from_op(vec![rows, n], out, Op::BroadcastRows(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Self::from_op(shape.to_vec(), self.values().to_vec(), Op::Reshape(self.clone())))
    }

    /// Accumulates d(self)/d(leaf) into every reachable requires-grad leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&Rc::as_ptr(&node.0)) else {
                continue;
            };
            node.propagate(&g, &mut grads);
        }
        Ok(())
    }

    /// Post-order over requires-grad nodes; each node appears exactly once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<*const Node, Vec<f64>>) {
        fn send(grads: &mut HashMap<*const Node, Vec<f64>>, to: &Tensor, contrib: Vec<f64>) {
            if !to.requires_grad() {
                return;
            }
            match grads.entry(Rc::as_ptr(&to.0)) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    e.get_mut().iter_mut().zip(&contrib).for_each(|(a, b)| *a += b);
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(contrib);
                }
            }
        }

        match &self.0.op {
            Op::Leaf => {
                if let Some(slot) = self.0.grad.borrow_mut().as_mut() {
                    slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = self.shape()[1];
                if a.requires_grad() {
                    // dA = G · Bᵀ  (or G · B when B was used transposed)
                    let mut da = vec![0.0; m * k];
                    let b_strides = if *transpose_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, g, (n, 1), b.values(), b_strides, &mut da);
                    send(grads, a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    if *transpose_b {
                        // dB[n,k] = Gᵀ · A
                        gemm(n, m, k, g, (1, n), a.values(), (k, 1), &mut db);
                    } else {
                        // dB[k,n] = Aᵀ · G
                        gemm(k, m, n, a.values(), (1, k), g, (n, 1), &mut db);
                    }
                    send(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                send(grads, a, g.to_vec());
                send(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, a, g.to_vec());
                send(grads, b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    send(grads, a, zip_map(g, b.values(), |g, y| g * y));
                }
                if b.requires_grad() {
                    send(grads, b, zip_map(g, a.values(), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => send(grads, a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(grads, a, g.to_vec()),
            Op::Relu(a) => send(
                grads,
                a,
                zip_map(g, a.values(), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Exp(a) => send(grads, a, zip_map(g, self.values(), |g, y| g * y)),
            Op::Log(a) => send(grads, a, zip_map(g, a.values(), |g, x| g / x)),
            Op::LogSoftmax(a) => {
                let cols = self.shape()[1];
                let mut da = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks(cols)
                    .zip(self.values().chunks(cols))
                    .zip(da.chunks_mut(cols))
                {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * gsum;
                    }
                }
                send(grads, a, da);
            }
            Op::Sum(a) => send(grads, a, vec![g[0]; a.numel()]),
            Op::BroadcastRows(a) => {
                let n = a.numel();
                let mut da = vec![0.0; n];
                for row in g.chunks(n) {
                    da.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                send(grads, a, da);
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `out[m,n] += A[m,k] · B[k,n]` with explicit (row, col) strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserted lengths and the caller-supplied strides describe
    // in-bounds m×k, k×n and m×n views of the three buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences and returns the worst coordinate's relative error
/// `|analytic - numeric| / max(GRAD_CHECK_FLOOR, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {step}")));
    }
    let shape = x.shape().to_vec();
    let base = x.values().to_vec();

    let leaf = Tensor::new(&shape, base.clone(), true)?;
    let out = f(&leaf)?;
    if !out.item().is_finite() {
        return Err(Error::Numeric("non-finite function value in grad_check".into()));
    }
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let v = f(&Tensor::constant(&shape, values)?)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("non-finite function value in grad_check".into()))
        }
    };

    let mut worst = 0.0_f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
