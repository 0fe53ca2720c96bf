//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to push gradients back to its inputs. `backward` walks the
//! tape in reverse once.

use std::collections::HashMap;

use crate::error::{dim_err, Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Powf(Var, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        inv_t: f64,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    PadRows(Var),
    StraightThrough(Var),
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. One per forward pass (or per batch).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(graph.value(v).shape(), g.clone()).expect("gradient shape matches value")
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A tracked input that is not a parameter (used by gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls with the same id reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::new(&[n, m], matmul_raw(ta.data(), tb.data(), n, k, m))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let m = tx.cols();
        if tb.len() != m {
            return Err(dim_err(
                "add_row",
                format!("{:?} + bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar", format!("factor shape {:?}", self.shape(s))));
        }
        let f = self.value(s).item();
        let out = self.value(x).map(|v| v * f);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::MulScalar(x, s), ng))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        if tc.len() != tx.rows() {
            return Err(dim_err(
                "mul_col",
                format!("{:?} by column {:?}", tx.shape(), tc.shape()),
            ));
        }
        let m = tx.cols();
        let mut out = tx.clone();
        for (row, &f) in out.data_mut().chunks_exact_mut(m).zip(tc.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.needs(x) || self.needs(col);
        Ok(self.push(out, Op::MulCol(x, col), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let ng = self.needs(x);
        self.push(out, Op::Abs(x), ng)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(p));
        let ng = self.needs(x);
        self.push(out, Op::Powf(x, p), ng)
    }

    /// Softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let tx = self.value(x);
        let (outer, len, inner) = tx.axis_split(axis)?;
        let inv_t = 1.0 / temperature;
        let mut out = tx.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = ((data[at(j)] - mx) * inv_t).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                inv_t,
            },
            ng,
        ))
    }

    /// Maximum along `axis`, removing it. Gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = tx.axis_split(axis)?;
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let d = tx.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let at = (o * len + j) * inner + i;
                    if d[at] > d[best] {
                        best = at;
                    }
                }
                vals.push(d[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(&shape, vals)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Max { x, argmax }, ng))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = tx.axis_split(axis)?;
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let d = tx.data();
        let mut vals = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    vals[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let out = Tensor::new(&shape, vals)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Row gather: output row `r` is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err("gather_rows", format!("index {bad} >= {n} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(tx.row_slice(i));
        }
        let out = Tensor::new(&[idx.len(), m], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(dim_err("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(&[n, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != m) {
            return Err(dim_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len() / m.max(1);
        let out = Tensor::new(&[n, m], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if start >= end || end > m {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {m}")));
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&tx.row_slice(r)[start..end]);
        }
        let out = Tensor::new(&[n, end - start], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start, end }, ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if start > end || end > n {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {n}")));
        }
        let data = tx.data()[start * m..end * m].to_vec();
        let out = Tensor::new(&[end - start, m], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// Appends zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if n > rows {
            return Err(dim_err("pad_rows", format!("{n} rows exceed target {rows}")));
        }
        let mut data = tx.data().to_vec();
        data.resize(rows * m, 0.0);
        let out = Tensor::new(&[rows, m], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::PadRows(x), ng))
    }

    /// Emits `forward` as the value while routing gradients to `surrogate`
    /// unchanged; the fused form of `detach(forward - surrogate) + surrogate`
    /// that keeps the forward value bit-exact.
    pub fn straight_through(&mut self, surrogate: Var, forward: Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(surrogate), &forward)?;
        let ng = self.needs(surrogate);
        Ok(self.push(forward, Op::StraightThrough(surrogate), ng))
    }

    /// Symmetric Chamfer distance between point sets `a` (n×3) and `b` (m×3):
    /// mean squared nearest-neighbour distance in each direction, summed.
    /// Nearest-neighbour ties go to the lower index.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() || ta.is_empty() || tb.is_empty() {
            return Err(dim_err(
                "chamfer",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (nn_ab, da) = nearest(ta, tb);
        let (nn_ba, db) = nearest(tb, ta);
        let value = da / ta.rows() as f64 + db / tb.rows() as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Chamfer { a, b, nn_ab, nn_ba },
            ng,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter gradients from `grads` into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    send(*a, matmul_a_bt(g, tb.data(), n, m, k));
                }
                if self.needs(*b) {
                    send(*b, matmul_at_b(ta.data(), g, n, k, m));
                }
            }
            Op::AddRow(x, b) => {
                let m = val(*b).len();
                if self.needs(*b) {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(*b, gb);
                }
                send(*x, g.to_vec());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.needs(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::MulScalar(x, s) => {
                let f = val(*s).item();
                if self.needs(*s) {
                    let ds: f64 = g.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                    send(*s, vec![ds]);
                }
                send(*x, g.iter().map(|v| v * f).collect());
            }
            Op::MulCol(x, c) => {
                let (tx, tc) = (val(*x), val(*c));
                let m = tx.cols();
                if self.needs(*c) {
                    let dc = g
                        .chunks_exact(m)
                        .zip(tx.data().chunks_exact(m))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*c, dc);
                }
                if self.needs(*x) {
                    let mut dx = g.to_vec();
                    for (row, &f) in dx.chunks_exact_mut(m).zip(tc.data()) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    send(*x, dx);
                }
            }
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(x) => send(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::Abs(x) => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Powf(x, p) => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| g * p * x.powf(p - 1.0))
                    .collect(),
            ),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                inv_t,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = inv_t * y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Max { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                send(*x, dx);
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            dx[(o * len + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Reshape(x) | Op::StraightThrough(x) => send(*x, g.to_vec()),
            Op::GatherRows { x, idx } => {
                let tx = val(*x);
                let m = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dx[i * m..(i + 1) * m];
                    dst.iter_mut()
                        .zip(&g[r * m..(r + 1) * m])
                        .for_each(|(d, s)| *d += s);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols { x, start, end } => {
                let tx = val(*x);
                let (n, m) = (tx.rows(), tx.cols());
                let w = end - start;
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let m = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                dx[start * m..start * m + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::PadRows(x) => {
                let len = val(*x).len();
                send(*x, g[..len].to_vec());
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let (na, nb) = (ta.rows() as f64, tb.rows() as f64);
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for (i, &j) in nn_ab.iter().enumerate() {
                    for c in 0..d {
                        let diff = 2.0 * g[0] * (ta.get2(i, c) - tb.get2(j, c)) / na;
                        da[i * d + c] += diff;
                        db[j * d + c] -= diff;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for c in 0..d {
                        let diff = 2.0 * g[0] * (tb.get2(j, c) - ta.get2(i, c)) / nb;
                        db[j * d + c] += diff;
                        da[i * d + c] -= diff;
                    }
                }
                send(*a, da);
                send(*b, db);
            }
        }
    }
}

/// For each row of `from`, the index of its nearest row in `to` and the sum
/// of those squared distances.
fn nearest(from: &Tensor, to: &Tensor) -> (Vec<usize>, f64) {
    let d = from.cols();
    let mut idx = Vec::with_capacity(from.rows());
    let mut total = 0.0;
    for i in 0..from.rows() {
        let p = from.row_slice(i);
        let mut best = (0, f64::INFINITY);
        for j in 0..to.rows() {
            let q = to.row_slice(j);
            let mut dist = 0.0;
            for c in 0..d {
                let t = p[c] - q[c];
                dist += t * t;
            }
            if dist < best.1 {
                best = (j, dist);
            }
        }
        idx.push(best.0);
        total += best.1;
    }
    (idx, total)
}
