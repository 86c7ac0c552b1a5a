//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order together with the
//! intermediates the backward pass needs. Nodes are addressed by [`Var`]
//! handles, which are plain indices into the tape. Because the tape is
//! append-only, reverse insertion order is a valid reverse topological order,
//! so [`Graph::backward`] visits each node exactly once and accumulates
//! adjoints additively across fan-out.
//!
//! ```
//! use cocoon::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to probabilities before they enter a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;
/// Upper bound applied to probabilities before they enter a logarithm.
pub const PROB_CEIL: f64 = 1.0 - 1e-7;
/// Norms below this are rejected by [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var, Option<Broadcast>),
    Sub(Var, Var, Option<Broadcast>),
    Mul(Var, Var, Option<Broadcast>),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    SoftmaxRows { x: Var, scale: f64 },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    ConcatCols(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
}

/// Flat index maps from a broadcast output back into both operands.
#[derive(Debug)]
struct Broadcast {
    a: Vec<usize>,
    b: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not connected to the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), data.clone()).ok()
    }

    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    // ----- linear algebra -------------------------------------------------

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    // ----- broadcasting elementwise binaries -----------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b, bc), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b, bc), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b, bc), &[a, b])
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Option<Broadcast>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(ta.shape().to_vec(), data)?, None));
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
        let bc = Broadcast {
            a: index_map(ta.shape(), &out_shape),
            b: index_map(tb.shape(), &out_shape),
        };
        let data =
            bc.a.iter()
                .zip(&bc.b)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
        Ok((Tensor::new(out_shape, data)?, Some(bc)))
    }

    // ----- elementwise unaries -------------------------------------------

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Natural logarithm. Non-positive inputs fail as non-finite.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `ln(clamp(p, PROB_FLOOR, PROB_CEIL))`.
    pub fn log_prob(&mut self, p: Var) -> Result<Var> {
        let c = self.clamp(p, PROB_FLOOR, PROB_CEIL)?;
        self.log(c)
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums a matrix over `axis` (0: down columns, 1: along rows).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::shape("sum_axis", format!("{:?} axis {axis}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let out = if axis == 0 {
            let mut acc = vec![0.0; n];
            for i in 0..m {
                for (a, v) in acc.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                    *a += v;
                }
            }
            acc
        } else {
            (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect()
        };
        let value = Tensor::vector(out)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    /// Means a matrix over `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ----- row-wise normalizations ---------------------------------------

    /// Row-wise `softmax(scale * x)` with max subtraction. Rank-1 input is
    /// one row.
    pub fn softmax_scaled(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("softmax scale must be positive, got {scale}")));
        }
        let t = self.value(x);
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (scale * (v - max)).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..start + c] {
                *e /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax_scaled", value, Op::SoftmaxRows { x, scale }, &[x])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= NORM_EPS) {
                return Err(Error::Degenerate(format!(
                    "cannot normalize row {r} with norm {norm:e}"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        debug_assert_eq!(out.len(), t.rows() * c);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    // ----- structural ----------------------------------------------------

    /// Concatenates two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::matrix(m, p + q, out)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    /// Stacks the listed rows of a matrix, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        }
        let value = t.select_rows(idx)?;
        self.push("gather_rows", value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::matrix(n, m, transpose_data(t.data(), m, n))?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    // ----- backward ------------------------------------------------------

    /// Propagates adjoints from a scalar `loss` to every node that requires
    /// a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let y = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let ga = matmul_bt(g, val(*b), m, n, k);
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb = matmul_at(val(*a), g, m, k, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b, bc) => {
                if wants(*a) {
                    reduce_into(
                        grads,
                        *a,
                        g,
                        bc.as_ref().map(|m| &m.a),
                        self.value(*a).len(),
                        |gk, _| gk,
                    );
                }
                if wants(*b) {
                    reduce_into(
                        grads,
                        *b,
                        g,
                        bc.as_ref().map(|m| &m.b),
                        self.value(*b).len(),
                        |gk, _| gk,
                    );
                }
            }
            Op::Sub(a, b, bc) => {
                if wants(*a) {
                    reduce_into(
                        grads,
                        *a,
                        g,
                        bc.as_ref().map(|m| &m.a),
                        self.value(*a).len(),
                        |gk, _| gk,
                    );
                }
                if wants(*b) {
                    reduce_into(
                        grads,
                        *b,
                        g,
                        bc.as_ref().map(|m| &m.b),
                        self.value(*b).len(),
                        |gk, _| -gk,
                    );
                }
            }
            Op::Mul(a, b, bc) => {
                let (da, db) = (val(*a), val(*b));
                let other_b = |k: usize| match bc {
                    Some(m) => db[m.b[k]],
                    None => db[k],
                };
                let other_a = |k: usize| match bc {
                    Some(m) => da[m.a[k]],
                    None => da[k],
                };
                if wants(*a) {
                    reduce_into(grads, *a, g, bc.as_ref().map(|m| &m.a), da.len(), |gk, k| {
                        gk * other_b(k)
                    });
                }
                if wants(*b) {
                    reduce_into(grads, *b, g, bc.as_ref().map(|m| &m.b), db.len(), |gk, k| {
                        gk * other_a(k)
                    });
                }
            }
            Op::Neg(x) => {
                let gx: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| c * v).collect();
                accumulate(grads, *x, &gx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Relu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gk, &xk)| if xk > 0.0 { *gk } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| gk * yk).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x)).map(|(gk, xk)| gk / xk).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| gk * yk * (1.0 - yk)).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gk, &xk)| if xk >= *lo && xk <= *hi { *gk } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gx = vec![g[0] / n as f64; n];
                accumulate(grads, *x, &gx);
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = if *axis == 0 { g[j] } else { g[i] };
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::SoftmaxRows { x, scale } => {
                let c = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let span = r * c..(r + 1) * c;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yk), gk) in gx[span].iter_mut().zip(yr).zip(gr) {
                        *o = scale * yk * (gk - dot);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yk), gk) in gx[span].iter_mut().zip(yr).zip(gr) {
                        *o = (gk - yk * dot) / norm;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let m = node.value.rows();
                if wants(*a) {
                    let ga: Vec<f64> = (0..m)
                        .flat_map(|i| g[i * (p + q)..i * (p + q) + p].iter().copied())
                        .collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = (0..m)
                        .flat_map(|i| g[i * (p + q) + p..(i + 1) * (p + q)].iter().copied())
                        .collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                accumulate(grads, *x, &transpose_data(g, m, n));
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (o, gk) in gx[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += gk;
                    }
                }
                accumulate(grads, *x, &gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Accumulates `f(g[k], k)` into the operand, summing over broadcast copies.
fn reduce_into(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    g: &[f64],
    map: Option<&Vec<usize>>,
    len: usize,
    f: impl Fn(f64, usize) -> f64,
) {
    let mut out = vec![0.0; len];
    match map {
        None => {
            for (k, (o, gk)) in out.iter_mut().zip(g).enumerate() {
                *o = f(*gk, k);
            }
        }
        Some(map) => {
            for (k, (&dst, gk)) in map.iter().zip(g).enumerate() {
                out[dst] += f(*gk, k);
            }
        }
    }
    accumulate(grads, v, &out);
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into `in_shape`.
fn index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    // Stride of each output axis inside the input; zero where broadcast.
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0; rank];
    for _ in 0..total {
        map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    map
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g[m×n] · b[k×n]ᵀ` → `m×k`.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gi.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]` → `k×n`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *o += aip * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::identity(2));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::identity(2));
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn relu_log_square() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let one = g.constant(Tensor::scalar(1.0));
        let l = g.log(one).unwrap();
        assert_eq!(g.item(l), 0.0);

        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn log_of_zero_is_named_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        match g.log(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn broadcast_row_bias() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.param(t(&[3], &[10., 20., 30.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn broadcast_scalar_mul_and_sub() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, c).unwrap();
        let z = g.sub(y, c).unwrap();
        assert_eq!(g.value(z).data(), &[0., 2., 4., 6.]);
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        // d/dc sum(x*c - c) = sum(x) - 4
        assert_eq!(grads.wrt(c).item(), 6.0);
        assert_eq!(grads.wrt(x).data(), &[2.0; 4]);
    }

    #[test]
    fn incompatible_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0.3; 4]));
        let p = g.softmax_scaled(x, 60.0).unwrap();
        for v in g.value(p).data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }

        let x = g.constant(t(&[3], &[1., 0., 0.]));
        let p = g.softmax_scaled(x, 60.0).unwrap();
        // e^60 / (e^60 + 2) = 1 - 2e^-60 / (1 + 2e^-60)
        let expected = 1.0 / (1.0 + 2.0 * (-60f64).exp());
        assert_eq!(g.value(p).data()[0], expected);
        assert!(g.value(p).data()[0] >= 1.0 - 1e-20);

        let x = g.constant(t(&[5], &[-3., 100., 2., 0.5, 7.]));
        let p = g.softmax_scaled(x, 1.7).unwrap();
        let s: f64 = g.value(p).data().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_rejects_nonpositive_scale() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1., 2.]));
        assert!(g.softmax_scaled(x, 0.0).is_err());
    }

    #[test]
    fn normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3., 4.]));
        let y = g.l2_normalize(x).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.8, epsilon = 1e-15);

        let u = g.constant(t(&[3], &[0., 1., 0.]));
        let v = g.l2_normalize(u).unwrap();
        assert_eq!(g.value(v).data(), &[0., 1., 0.]);

        let z = g.constant(Tensor::zeros(vec![3]));
        assert!(matches!(g.l2_normalize(z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![3]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_params_and_disconnected() {
        let mut g = Graph::new();
        let w = g.param(t(&[2, 2], &[0.1, -4., 2., 9.]));
        let unused = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0; 4]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.exp(x).unwrap();
        let c = g.add(a, b).unwrap();
        let d = g.add(c, x).unwrap();
        let grads = g.backward(d).unwrap();
        assert_abs_diff_eq!(grads.wrt(x).item(), 4.0 + 2f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn concat_gather_sum_axis() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 1], &[1., 2.]));
        let b = g.param(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let r = g.gather_rows(c, &[1, 1, 0]).unwrap();
        assert_eq!(g.shape(r), &[3, 3]);
        let cols = g.sum_axis(r, 0).unwrap();
        assert_eq!(g.value(cols).data(), &[5., 13., 16.]);
        let rows = g.sum_axis(r, 1).unwrap();
        assert_eq!(g.value(rows).data(), &[13., 13., 8.]);
        let s = g.sum(cols).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1., 2.]);
        assert_eq!(grads.wrt(b).data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(t(&[2, 3], &[0.1, 0.7, -0.3, 1.9, 2.2, -0.8]));
            let b = g.constant(t(&[3, 2], &[0.5, -1.1, 0.25, 0.9, 1.3, 0.01]));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_scaled(c, 60.0).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}
