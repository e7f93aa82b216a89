//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! The [`Graph`] is define-by-run: every builder call evaluates its value
//! immediately and appends a [`Node`]. Adjoint rules are themselves written with
//! the same primitives, so the nodes returned by [`Graph::gradient`] with
//! `create_graph = true` can be differentiated again. That is what makes
//! Hessian-vector products, and parameter gradients of expressions containing
//! them, available without special cases.
//!
//! Node ids index into an append-only arena, so insertion order is a
//! topological order. [`Graph::mark`] / [`Graph::rewind`] drop a suffix of
//! nodes, which keeps long solver loops (one backward pass per iteration) from
//! growing the arena.

mod array;

pub(crate) use array::matmul;
pub use array::ArrayValue;

use thiserror::Error;

use crate::activations::{self, ActivationKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: operand shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("`{op}` expects {expected} parent(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("node {0} does not belong to this graph (len {1})")]
    UnknownNode(usize, usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Shapes: `[m, n]` matrices, `[n]` vectors, `[]` scalars.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Differentiable input (data or parameter).
    Leaf,
    /// Constant; gradients never flow through it.
    Constant,
    Add,
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    /// `op(a) op(b)` with optional transposes.
    MatMul {
        ta: bool,
        tb: bool,
    },
    /// `[m, n] + [n]` broadcast over rows.
    AddRow,
    /// `[m, n] * [n]` broadcast over rows.
    MulRow,
    /// `[m, n] -> [n]`.
    SumRows,
    /// `[n] -> [rows, n]`.
    BroadcastRows(usize),
    /// Any shape to `[]`.
    SumAll,
    /// `[] -> shape`.
    BroadcastScalar(Vec<usize>),
    /// `a * s` for a scalar node `s`.
    ScaleBy,
    /// `sum(a * b)` to `[]`.
    Dot,
    /// Elementwise derivative of the given order of an activation (0 = value).
    Activation(ActivationKind, u32),
    Exp,
    /// Column concatenation of two matrices with equal row counts.
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    /// Embeds `[m, len]` into zeros of width `total` starting at `start`.
    PadCols {
        start: usize,
        total: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::SumAll => "sum_all",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::ScaleBy => "scale_by",
            Op::Dot => "dot",
            Op::Activation(..) => "activation",
            Op::Exp => "exp",
            Op::ConcatCols => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf | Op::Constant => 0,
            Op::Scale(_)
            | Op::SumRows
            | Op::BroadcastRows(_)
            | Op::SumAll
            | Op::BroadcastScalar(_)
            | Op::Activation(..)
            | Op::Exp
            | Op::SliceCols { .. }
            | Op::PadCols { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: ArrayValue,
    pub requires_grad: bool,
}

/// Append-only computation record.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &ArrayValue {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Current arena length, for a later [`Graph::rewind`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node created after `mark`. Ids of dropped nodes become invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: ArrayValue) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    pub fn constant(&mut self, value: ArrayValue) -> NodeId {
        self.push(Op::Constant, Vec::new(), value, false)
    }

    /// A constant copy of `n`; gradients do not flow through the result.
    pub fn detach(&mut self, n: NodeId) -> NodeId {
        let value = self.nodes[n.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: ArrayValue, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends `op` applied to `parents`, checking shapes.
    pub fn apply(&mut self, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        if parents.len() != op.arity() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: parents.len(),
            });
        }
        for p in parents {
            if p.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(p.0, self.nodes.len()));
            }
        }
        let value = self.evaluate(&op, parents)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(op, parents.to_vec(), value, requires_grad))
    }

    fn evaluate(&self, op: &Op, parents: &[NodeId]) -> Result<ArrayValue> {
        let val = |i: usize| &self.nodes[parents[i].0].value;
        let shape_err = || AutodiffError::Shape {
            op: op.name(),
            shapes: parents.iter().map(|p| self.nodes[p.0].value.shape().to_vec()).collect(),
        };
        let out = match op {
            Op::Leaf | Op::Constant => unreachable!("leaves carry their own value"),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(shape_err());
                }
                let data = a.data().iter().zip(b.data());
                let data: Vec<f64> = match op {
                    Op::Add => data.map(|(x, y)| x + y).collect(),
                    Op::Sub => data.map(|(x, y)| x - y).collect(),
                    _ => data.map(|(x, y)| x * y).collect(),
                };
                ArrayValue::new(a.shape().to_vec(), data)?
            }
            Op::Scale(c) => val(0).map(|x| c * x),
            Op::MatMul { ta, tb } => {
                let (a, b) = (val(0), val(1));
                if a.ndim() != 2 || b.ndim() != 2 {
                    return Err(shape_err());
                }
                let k_a = if *ta { a.shape()[0] } else { a.shape()[1] };
                let k_b = if *tb { b.shape()[1] } else { b.shape()[0] };
                if k_a != k_b {
                    return Err(shape_err());
                }
                matmul(a, b, *ta, *tb)
            }
            Op::AddRow | Op::MulRow => {
                let (a, r) = (val(0), val(1));
                if a.ndim() != 2 || r.shape() != [a.shape()[1]] {
                    return Err(shape_err());
                }
                let n = a.shape()[1];
                let rd = r.data();
                let data: Vec<f64> = if *op == Op::AddRow {
                    a.data().iter().enumerate().map(|(i, x)| x + rd[i % n]).collect()
                } else {
                    a.data().iter().enumerate().map(|(i, x)| x * rd[i % n]).collect()
                };
                ArrayValue::new(a.shape().to_vec(), data)?
            }
            Op::SumRows => {
                let a = val(0);
                if a.ndim() != 2 {
                    return Err(shape_err());
                }
                let n = a.shape()[1];
                let mut out = vec![0.0; n];
                for row in a.data().chunks(n.max(1)) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                ArrayValue::vector(out)
            }
            Op::BroadcastRows(m) => {
                let a = val(0);
                if a.ndim() != 1 {
                    return Err(shape_err());
                }
                let n = a.len();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..*m {
                    data.extend_from_slice(a.data());
                }
                ArrayValue::matrix(*m, n, data)
            }
            Op::SumAll => ArrayValue::scalar(val(0).data().iter().sum()),
            Op::BroadcastScalar(shape) => {
                let a = val(0);
                if a.len() != 1 || a.ndim() != 0 {
                    return Err(shape_err());
                }
                ArrayValue::full(shape, a.item())
            }
            Op::ScaleBy => {
                let (a, s) = (val(0), val(1));
                if s.ndim() != 0 {
                    return Err(shape_err());
                }
                let c = s.item();
                a.map(|x| c * x)
            }
            Op::Dot => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(shape_err());
                }
                ArrayValue::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
            }
            Op::Activation(kind, order) => {
                let a = val(0);
                ArrayValue::new(
                    a.shape().to_vec(),
                    activations::derivative_slice(*kind, *order, a.data()),
                )?
            }
            Op::Exp => val(0).map(f64::exp),
            Op::ConcatCols => {
                let (a, b) = (val(0), val(1));
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[0] {
                    return Err(shape_err());
                }
                let (m, n1, n2) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut data = Vec::with_capacity(m * (n1 + n2));
                for i in 0..m {
                    data.extend_from_slice(a.row(i));
                    data.extend_from_slice(b.row(i));
                }
                ArrayValue::matrix(m, n1 + n2, data)
            }
            Op::SliceCols { start, len } => {
                let a = val(0);
                if a.ndim() != 2 || start + len > a.shape()[1] {
                    return Err(shape_err());
                }
                let m = a.shape()[0];
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&a.row(i)[*start..start + len]);
                }
                ArrayValue::matrix(m, *len, data)
            }
            Op::PadCols { start, total } => {
                let a = val(0);
                if a.ndim() != 2 || start + a.shape()[1] > *total {
                    return Err(shape_err());
                }
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut data = vec![0.0; m * total];
                for i in 0..m {
                    data[i * total + start..i * total + start + n].copy_from_slice(a.row(i));
                }
                ArrayValue::matrix(m, *total, data)
            }
        };
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { ta: false, tb: false }, &[a, b])
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { ta: false, tb: true }, &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow, &[a, row])
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::MulRow, &[a, row])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumRows, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumAll, &[a])
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.apply(Op::ScaleBy, &[a, s])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Dot, &[a, b])
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.dot(a, a)
    }

    pub fn activation(&mut self, kind: ActivationKind, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Activation(kind, 0), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::ConcatCols, &[a, b])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::SliceCols { start, len }, &[a])
    }

    /// `x W^T + b` for `x: [m, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul_nt(x, w)?;
        self.add_row(xw, b)
    }

    /// Local adjoint contributions `(parent index, adjoint node)` of node `id`
    /// given its output adjoint `g`.
    fn adjoint(&mut self, id: NodeId, g: NodeId, wanted: &[bool]) -> Result<Vec<(usize, NodeId)>> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let ps = node.parents.clone();
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                if wanted[0] {
                    out.push((0, g));
                }
                if wanted[1] {
                    out.push((1, g));
                }
            }
            Op::Sub => {
                if wanted[0] {
                    out.push((0, g));
                }
                if wanted[1] {
                    out.push((1, self.scale(g, -1.0)?));
                }
            }
            Op::Mul => {
                if wanted[0] {
                    out.push((0, self.mul(g, ps[1])?));
                }
                if wanted[1] {
                    out.push((1, self.mul(g, ps[0])?));
                }
            }
            Op::Scale(c) => out.push((0, self.scale(g, c)?)),
            Op::MatMul { ta, tb } => {
                let (a, b) = (ps[0], ps[1]);
                if wanted[0] {
                    // C = op(A) op(B): dA from g op(B)^T, transposed when ta
                    let ga = if ta {
                        self.apply(Op::MatMul { ta: tb, tb: true }, &[b, g])?
                    } else {
                        self.apply(Op::MatMul { ta: false, tb: !tb }, &[g, b])?
                    };
                    out.push((0, ga));
                }
                if wanted[1] {
                    let gb = if tb {
                        self.apply(Op::MatMul { ta: true, tb: ta }, &[g, a])?
                    } else {
                        self.apply(Op::MatMul { ta: !ta, tb: false }, &[a, g])?
                    };
                    out.push((1, gb));
                }
            }
            Op::AddRow => {
                if wanted[0] {
                    out.push((0, g));
                }
                if wanted[1] {
                    out.push((1, self.sum_rows(g)?));
                }
            }
            Op::MulRow => {
                if wanted[0] {
                    out.push((0, self.mul_row(g, ps[1])?));
                }
                if wanted[1] {
                    let ga = self.mul(g, ps[0])?;
                    out.push((1, self.sum_rows(ga)?));
                }
            }
            Op::SumRows => {
                let m = self.nodes[ps[0].0].value.shape()[0];
                out.push((0, self.apply(Op::BroadcastRows(m), &[g])?));
            }
            Op::BroadcastRows(_) => out.push((0, self.sum_rows(g)?)),
            Op::SumAll => {
                let shape = self.nodes[ps[0].0].value.shape().to_vec();
                out.push((0, self.apply(Op::BroadcastScalar(shape), &[g])?));
            }
            Op::BroadcastScalar(_) => out.push((0, self.sum_all(g)?)),
            Op::ScaleBy => {
                if wanted[0] {
                    out.push((0, self.scale_by(g, ps[1])?));
                }
                if wanted[1] {
                    out.push((1, self.dot(g, ps[0])?));
                }
            }
            Op::Dot => {
                if wanted[0] {
                    out.push((0, self.scale_by(ps[1], g)?));
                }
                if wanted[1] {
                    out.push((1, self.scale_by(ps[0], g)?));
                }
            }
            Op::Activation(kind, order) => {
                let d = self.apply(Op::Activation(kind, order + 1), &[ps[0]])?;
                out.push((0, self.mul(g, d)?));
            }
            Op::Exp => out.push((0, self.mul(g, id)?)),
            Op::ConcatCols => {
                let n1 = self.nodes[ps[0].0].value.shape()[1];
                let n2 = self.nodes[ps[1].0].value.shape()[1];
                if wanted[0] {
                    out.push((0, self.slice_cols(g, 0, n1)?));
                }
                if wanted[1] {
                    out.push((1, self.slice_cols(g, n1, n2)?));
                }
            }
            Op::SliceCols { start, .. } => {
                let total = self.nodes[ps[0].0].value.shape()[1];
                out.push((0, self.apply(Op::PadCols { start, total }, &[g])?));
            }
            Op::PadCols { start, .. } => {
                let len = self.nodes[ps[0].0].value.shape()[1];
                out.push((0, self.slice_cols(g, start, len)?));
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar node with respect to `wrt`.
    ///
    /// A `wrt` node that the scalar does not depend on gets a zero array of its
    /// shape. With `create_graph` the returned nodes stay connected to the graph
    /// and can be differentiated again; otherwise the backward nodes are
    /// discarded and detached constants are returned.
    pub fn gradient(&mut self, scalar: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
        let len = self.nodes.len();
        for w in wrt.iter().chain(std::iter::once(&scalar)) {
            if w.0 >= len {
                return Err(AutodiffError::UnknownNode(w.0, len));
            }
        }
        let out_shape = self.nodes[scalar.0].value.shape();
        if !out_shape.is_empty() {
            return Err(AutodiffError::NonScalar(out_shape.to_vec()));
        }

        let end = scalar.0 + 1;
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(end).min(end);
        // nodes in [start, end) that depend on some wrt node
        let mut depends = vec![false; end.saturating_sub(start)];
        for w in wrt {
            if w.0 < end {
                depends[w.0 - start] = true;
            }
        }
        for i in start..end {
            if !depends[i - start] {
                depends[i - start] = self.nodes[i]
                    .parents
                    .iter()
                    .any(|p| p.0 >= start && depends[p.0 - start]);
            }
        }

        let mark = self.mark();
        let mut adj: Vec<Option<NodeId>> = vec![None; end.saturating_sub(start)];
        if end > start && depends[scalar.0 - start] {
            adj[scalar.0 - start] = Some(self.constant(ArrayValue::scalar(1.0)));
            for i in (start..end).rev() {
                let Some(g) = adj[i - start] else { continue };
                let wanted: Vec<bool> = self.nodes[i]
                    .parents
                    .iter()
                    .map(|p| p.0 >= start && depends[p.0 - start])
                    .collect();
                if !wanted.iter().any(|&w| w) {
                    continue;
                }
                let contribs = self.adjoint(NodeId(i), g, &wanted)?;
                for (k, c) in contribs {
                    let p = self.nodes[i].parents[k].0;
                    adj[p - start] = Some(match adj[p - start] {
                        Some(prev) => self.add(prev, c)?,
                        None => c,
                    });
                }
            }
        }

        let values: Vec<Option<NodeId>> = wrt
            .iter()
            .map(|w| if w.0 < end { adj[w.0 - start] } else { None })
            .collect();
        if create_graph {
            let mut res = Vec::with_capacity(wrt.len());
            for (w, v) in wrt.iter().zip(values) {
                res.push(match v {
                    Some(id) => id,
                    None => {
                        let zeros = ArrayValue::zeros(self.nodes[w.0].value.shape());
                        self.constant(zeros)
                    }
                });
            }
            Ok(res)
        } else {
            let arrays: Vec<ArrayValue> = wrt
                .iter()
                .zip(values)
                .map(|(w, v)| match v {
                    Some(id) => self.nodes[id.0].value.clone(),
                    None => ArrayValue::zeros(self.nodes[w.0].value.shape()),
                })
                .collect();
            self.rewind(mark);
            Ok(arrays.into_iter().map(|a| self.constant(a)).collect())
        }
    }

    /// Gradient values only; the backward nodes are discarded.
    pub fn gradient_values(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<ArrayValue>> {
        let mark = self.mark();
        let ids = self.gradient(scalar, wrt, false)?;
        let vals = ids.iter().map(|&id| self.value(id).clone()).collect();
        self.rewind(mark);
        Ok(vals)
    }

    /// Hessian-vector product `H v`, `H = d^2 scalar / dx^2`, computed as the
    /// gradient of `<grad scalar, v>`.
    pub fn hvp(&mut self, scalar: NodeId, x: NodeId, v: &ArrayValue, create_graph: bool) -> Result<NodeId> {
        let grad = self.gradient(scalar, &[x], true)?[0];
        self.grad_vector_product(grad, x, v, create_graph)
    }

    /// `d/dx <grad, v>` for an existing differentiable gradient node.
    pub fn grad_vector_product(
        &mut self,
        grad: NodeId,
        x: NodeId,
        v: &ArrayValue,
        create_graph: bool,
    ) -> Result<NodeId> {
        if v.shape() != self.shape(grad) {
            return Err(AutodiffError::Shape {
                op: "hvp",
                shapes: vec![self.shape(grad).to_vec(), v.shape().to_vec()],
            });
        }
        let v = self.constant(v.clone());
        let gv = self.dot(grad, v)?;
        Ok(self.gradient(gv, &[x], create_graph)?[0])
    }
}
