//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! checks its output for NaN/Inf, and records enough to run its adjoint.
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! ```
//! use fewshot_core::autodiff::Graph;
//! use fewshot_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum_all(sq).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Parameters are not copied onto the tape: a graph borrows its
//! [`ParamStore`] and param leaves read from it directly.

mod gradcheck;
mod params;

pub use gradcheck::{
    analytic_gradients, grad_check, grad_check_sampled, numeric_gradients, GradCheckReport,
    ParamCheck,
};
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{axis_split, numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Pow(f64),
    Abs,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    /// `1/x` where `|x| >= eps`, else 0 (with zero gradient).
    SafeRecip(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    SoftmaxRows(Var),
    Reduce {
        x: Var,
        kind: Reduce,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Broadcast {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Unary(_, x)
            | Op::SoftmaxRows(x)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::Reduce { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Broadcast { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    // `None` for param leaves; their value lives in the store.
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_nodes: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store().tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn store(&self) -> &'p ParamStore {
        self.params.expect("graph has no parameter store")
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (or constant). Its gradient is still available
    /// through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(t),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av, bv);
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::invalid("transpose", "rank-2 tensor required"));
        }
        let out = transpose_raw(xv);
        self.push(Op::Transpose(x), out, "transpose")
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        if kind == Binary::Div && bv.data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push(Op::Binary(kind, a, b), out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (name, domain_ok): (&'static str, fn(f64, Unary) -> bool) = match kind {
            Unary::Log => ("log", |v, _| v > 0.0),
            Unary::Sqrt => ("sqrt", |v, _| v >= 0.0),
            Unary::Pow(_) => ("pow", |v, k| match k {
                Unary::Pow(p) => v >= 0.0 || p.fract() == 0.0,
                _ => true,
            }),
            Unary::Tanh => ("tanh", |_, _| true),
            Unary::Sigmoid => ("sigmoid", |_, _| true),
            Unary::Exp => ("exp", |_, _| true),
            Unary::Abs => ("abs", |_, _| true),
            Unary::Neg => ("neg", |_, _| true),
            Unary::Scale(_) => ("scale", |_, _| true),
            Unary::AddScalar(_) => ("add_scalar", |_, _| true),
            Unary::Clamp(..) => ("clamp", |_, _| true),
            Unary::SafeRecip(_) => ("safe_recip", |_, _| true),
        };
        if let Some(bad) = xv.data().iter().find(|&&v| !domain_ok(v, kind)) {
            return Err(Error::domain(name, format!("argument {bad} out of domain")));
        }
        let data = xv.data().iter().map(|&v| unary_forward(kind, v)).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(Op::Unary(kind, x), out, name)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Pow(p), x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, f64::INFINITY), x)
    }

    pub fn safe_recip(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(Unary::SafeRecip(eps), x)
    }

    /// Row-wise softmax of a rank-2 tensor (rank 1 is one row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() > 2 || xv.rank() == 0 {
            return Err(Error::invalid("softmax_rows", "rank 1 or 2 required"));
        }
        let n = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push(Op::SoftmaxRows(x), out, "softmax_rows")
    }

    /// Reduces `axis` away.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::invalid(
                "reduce",
                format!("axis {axis} out of range for shape {:?}", xv.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out_shape = xv.shape().to_vec();
        out_shape.remove(axis);
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        for j in 0..inner {
                            out[o * inner + j] += src[base + j];
                        }
                    }
                }
                if kind == Reduce::Mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
            Reduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let mut best = 0;
                        let mut best_v = src[o * n * inner + j];
                        for i in 1..n {
                            let v = src[(o * n + i) * inner + j];
                            if v > best_v {
                                best = i;
                                best_v = v;
                            }
                        }
                        out[o * inner + j] = best_v;
                        argmax[o * inner + j] = best;
                    }
                }
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        self.push(
            Op::Reduce {
                x,
                kind,
                axis,
                argmax,
            },
            out,
            "reduce",
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    pub fn max_over(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Max, x, axis)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s), "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty { op: "concat" })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let xv = self.value(x);
                let chunk = xv.shape()[axis] * inner;
                data.extend_from_slice(&xv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            out,
            "concat",
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push(Op::Slice { x, axis, start }, out, "slice")
    }

    /// Rows of a rank-2 tensor, in `idx` order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::invalid("gather_rows", "rank-2 tensor required"));
        }
        if idx.is_empty() {
            return Err(Error::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", xv.rows()),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[idx.len(), xv.cols()], data)?;
        self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            out,
            "gather_rows",
        )
    }

    /// Broadcasts `x` to `shape`; ranks must match and every source extent
    /// must be 1 or equal to the target extent.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let src = xv.shape();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != 1 && s != t) {
            return Err(Error::shape("broadcast_to", src, shape));
        }
        let rank = shape.len();
        let mut src_strides = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            src_strides[d] = if src[d] == 1 { 0 } else { acc };
            acc *= src[d];
        }
        let total = numel(shape);
        let mut map = Vec::with_capacity(total);
        let mut index = vec![0usize; rank];
        for _ in 0..total {
            map.push(index.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                index[d] += 1;
                if index[d] < shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        let data = map.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push(Op::Broadcast { x, map }, out, "broadcast_to")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let out = xv.clone().with_shape(shape);
        self.push(Op::Reshape(x), out, "reshape")
    }

    /// `x[m,n] + b[n]` with `b` broadcast across rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = self.value(b).numel();
        if shape.len() != 2 || shape[1] != n {
            return Err(Error::shape("add_row", &shape, self.value(b).shape()));
        }
        let b2 = self.reshape(b, &[1, n])?;
        let bb = self.broadcast_to(b2, &shape)?;
        self.add(x, bb)
    }

    /// Runs the reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.node_backward(i, g, lo);
        }
        let param_nodes = self
            .param_nodes
            .iter()
            .map(|v| v.filter(|v| v.0 <= root.0))
            .collect();
        Ok(Gradients { grads, param_nodes })
    }

    fn node_backward(&self, i: usize, g: &Tensor, acc: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = matmul_raw(g, &transpose_raw(bv));
                let db = matmul_raw(&transpose_raw(av), g);
                accumulate(acc, *a, da);
                accumulate(acc, *b, db);
            }
            Op::Transpose(x) => accumulate(acc, *x, transpose_raw(g)),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = g.numel();
                let (mut da, mut db) = (vec![0.0; n], vec![0.0; n]);
                for k in 0..n {
                    let (x, y, gk) = (av.data()[k], bv.data()[k], g.data()[k]);
                    let (dx, dy) = match kind {
                        Binary::Add => (gk, gk),
                        Binary::Sub => (gk, -gk),
                        Binary::Mul => (gk * y, gk * x),
                        Binary::Div => (gk / y, -gk * x / (y * y)),
                    };
                    da[k] = dx;
                    db[k] = dy;
                }
                accumulate(acc, *a, Tensor::new(g.shape(), da).unwrap());
                accumulate(acc, *b, Tensor::new(g.shape(), db).unwrap());
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let yv = out.unwrap();
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(gk, (&xk, &yk))| gk * unary_derivative(*kind, xk, yk))
                    .collect();
                accumulate(acc, *x, Tensor::new(g.shape(), data).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = out.unwrap();
                let n = *y.shape().last().unwrap();
                let mut data = vec![0.0; y.numel()];
                for ((dst, yr), gr) in data
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        dst[k] = yr[k] * (gr[k] - dot);
                    }
                }
                accumulate(acc, *x, Tensor::new(y.shape(), data).unwrap());
            }
            Op::Reduce {
                x,
                kind,
                axis,
                argmax,
            } => {
                let xv = self.value(*x);
                let (outer, n, inner) = axis_split(xv.shape(), *axis);
                let mut data = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let gk = g.data()[o * inner + j];
                        match kind {
                            Reduce::Sum => {
                                for i in 0..n {
                                    data[(o * n + i) * inner + j] = gk;
                                }
                            }
                            Reduce::Mean => {
                                for i in 0..n {
                                    data[(o * n + i) * inner + j] = gk / n as f64;
                                }
                            }
                            Reduce::Max => {
                                let i = argmax[o * inner + j];
                                data[(o * n + i) * inner + j] = gk;
                            }
                        }
                    }
                }
                accumulate(acc, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                accumulate(acc, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let shape = self.value(x).shape();
                    let n = shape[*axis];
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[from..from + n * inner]);
                    }
                    accumulate(acc, x, Tensor::new(shape, data).unwrap());
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, n, inner) = axis_split(xv.shape(), *axis);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    data[to..to + len * inner]
                        .copy_from_slice(&g.data()[from..from + len * inner]);
                }
                accumulate(acc, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut data = vec![0.0; xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[i * c + j] += g.data()[r * c + j];
                    }
                }
                accumulate(acc, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::Broadcast { x, map } => {
                let xv = self.value(*x);
                let mut data = vec![0.0; xv.numel()];
                for (k, &src) in map.iter().enumerate() {
                    data[src] += g.data()[k];
                }
                accumulate(acc, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(acc, *x, g.clone().with_shape(&shape));
            }
        }
    }

    /// Input nodes of `v` (for tape inspection).
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }
}

fn accumulate(acc: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut acc[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to a tape node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// One gradient per stored parameter, in store order. Parameters the
    /// root does not depend on, and frozen ones, get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, p)| match self.param(id) {
                Some(g) if p.trainable => g.clone(),
                _ => Tensor::zeros(p.tensor.shape()),
            })
            .collect()
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).unwrap()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Pow(p) => x.powf(p),
        Unary::Abs => x.abs(),
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::SafeRecip(eps) => {
            if x.abs() >= eps {
                1.0 / x
            } else {
                0.0
            }
        }
    }
}

// Non-differentiable points take the zero subgradient: abs at 0,
// sqrt at 0, x^p at 0 for p < 1, clamp outside its range.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Pow(p) => {
            if x == 0.0 && p < 1.0 {
                0.0
            } else {
                p * x.powf(p - 1.0)
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Clamp(lo, hi) => {
            if x < lo || x > hi {
                0.0
            } else {
                1.0
            }
        }
        Unary::SafeRecip(eps) => {
            if x.abs() >= eps {
                -y * y
            } else {
                0.0
            }
        }
    }
}
