//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op evaluates eagerly and appends a node to the [`Tape`]. Nodes
//! that depend on a leaf created with `requires_grad = true` also record
//! how they were produced; [`Tape::backward`] walks those records in
//! reverse insertion order, which is a topological order because a node's
//! inputs always exist before it does.
//!
//! Matrices are rank-2 row-major tensors; most ops assume rank 2.

use crate::error::{MgfError, Result};
use crate::numerics::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    SoftClamp(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Broadcast(Var),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> MgfError {
    MgfError::Shape {
        op,
        shapes: shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs "),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, &[s])),
    }
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

    /// Adds an input tensor. Gradients are only tracked for leaves with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, &[sa, sb]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(MgfError::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        let t = self.value(a).map(f64::ln);
        Ok(self.push(t, Op::Log(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    /// `bound · tanh(a / bound)`: smooth saturation into `(-bound, bound)`.
    pub fn soft_clamp(&mut self, a: Var, bound: f64) -> Var {
        let t = self.value(a).map(|x| bound * (x / bound).tanh());
        self.push(t, Op::SoftClamp(a, bound), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums of an `m×n` matrix as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_matrix("sum_cols", self.value(a))?;
        let d = self.value(a).data();
        let out = (0..m).map(|r| d[r * n..(r + 1) * n].iter().sum()).collect();
        Ok(self.push(Tensor::from_parts(vec![m, 1], out), Op::SumCols(a), &[a]))
    }

    /// Expands unit extents of `a` to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (sr, sc) = require_matrix("broadcast", src)?;
        let [r, c] = shape else {
            return Err(shape_err("broadcast", &[src.shape(), shape]));
        };
        let (r, c) = (*r, *c);
        if (sr != r && sr != 1) || (sc != c && sc != 1) {
            return Err(shape_err("broadcast", &[src.shape(), shape]));
        }
        let d = src.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let si = if sr == 1 { 0 } else { i };
            if sc == 1 {
                out.extend(std::iter::repeat_n(d[si], c));
            } else {
                out.extend_from_slice(&d[si * sc..(si + 1) * sc]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::Broadcast(a), &[a]))
    }

    /// Column range `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, n) = require_matrix("slice", self.value(a))?;
        if start >= end || end > n {
            return Err(MgfError::Shape {
                op: "slice",
                shapes: format!("{:?} cols {start}..{end}", self.value(a).shape()),
            });
        }
        self.gather_cols(a, &(start..end).collect::<Vec<_>>())
    }

    /// Selects (and possibly repeats or reorders) columns.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = require_matrix("gather_cols", self.value(a))?;
        if cols.is_empty() || cols.iter().any(|&c| c >= n) {
            return Err(MgfError::Shape {
                op: "gather_cols",
                shapes: format!("{:?} cols {cols:?}", self.value(a).shape()),
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            out.extend(cols.iter().map(|&c| d[r * n + c]));
        }
        let t = Tensor::from_parts(vec![m, cols.len()], out);
        Ok(self.push(t, Op::GatherCols(a, cols.to_vec()), &[a]))
    }

    /// Selects (and possibly repeats or reorders) rows.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = require_matrix("gather_rows", self.value(a))?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(MgfError::Shape {
                op: "gather_rows",
                shapes: format!("{:?} rows (len {})", self.value(a).shape(), rows.len()),
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_parts(vec![rows.len(), n], out);
        Ok(self.push(t, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(MgfError::Shape {
                op: "concat",
                shapes: format!("{} parts, axis {axis}", parts.len()),
            });
        }
        let dims = parts
            .iter()
            .map(|&p| require_matrix("concat", self.value(p)))
            .collect::<Result<Vec<_>>>()?;
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
        let t = if axis == 1 {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(shape_err("concat", &shapes));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m * n);
            for r in 0..m {
                for (&p, &(_, pn)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p).data()[r * pn..(r + 1) * pn]);
                }
            }
            Tensor::from_parts(vec![m, n], out)
        } else {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(shape_err("concat", &shapes));
            }
            let m: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(m * n);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `a + b` where `b` is broadcast to `a`'s shape (e.g. a bias row).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let b = if self.value(b).shape() == shape.as_slice() {
            b
        } else {
            self.broadcast(b, &shape)?
        };
        self.add(a, b)
    }

    /// `a ⊙ b` where `b` is broadcast to `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let b = if self.value(b).shape() == shape.as_slice() {
            b
        } else {
            self.broadcast(b, &shape)?
        };
        self.mul(a, b)
    }

    /// Validation op: errors if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        self.value(v).ensure_finite(what)
    }

    /// Reverse pass from a scalar output. Every node reachable backwards from
    /// `output` that requires grad receives the sum of its contributions.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(MgfError::Shape {
                op: "backward",
                shapes: format!("{:?} (output must be scalar)", out.shape()),
            });
        }
        out.ensure_finite("backward output")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out.shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(contrib.data())
                .for_each(|(e, c)| *e += c),
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        &mut da,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm_strided(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        &mut db,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Exp(a) => {
                let t = elementwise(self.value(*a), &|_, y, g| g * y);
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let t = elementwise(self.value(*a), &|x, _, g| g / x);
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = elementwise(self.value(*a), &|_, y, g| g * (1.0 - y * y));
                self.accumulate(grads, *a, t);
            }
            Op::SoftClamp(a, bound) => {
                let t = elementwise(self.value(*a), &|_, y, g| {
                    let th = y / bound;
                    g * (1.0 - th * th)
                });
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let t = elementwise(self.value(*a), &|x, _, g| 2.0 * x * g);
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(shape, g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.item() / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(ta.shape().to_vec(), v));
            }
            Op::SumCols(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    d.extend(std::iter::repeat_n(g.data()[r], n));
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], d));
            }
            Op::Broadcast(a) => {
                let src = self.value(*a);
                let (sr, sc) = (src.rows(), src.cols());
                let (r, c) = (g.rows(), g.cols());
                let mut d = vec![0.0; sr * sc];
                for i in 0..r {
                    let si = if sr == 1 { 0 } else { i };
                    for j in 0..c {
                        let sj = if sc == 1 { 0 } else { j };
                        d[si * sc + sj] += g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![sr, sc], d));
            }
            Op::GatherCols(a, cols) => {
                let src = self.value(*a);
                let (m, n) = (src.rows(), src.cols());
                let w = cols.len();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for (j, &c) in cols.iter().enumerate() {
                        d[r * n + c] += g.data()[r * w + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], d));
            }
            Op::GatherRows(a, rows) => {
                let src = self.value(*a);
                let (m, n) = (src.rows(), src.cols());
                let mut d = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut d[r * n..(r + 1) * n];
                    dst.iter_mut()
                        .zip(&g.data()[i * n..(i + 1) * n])
                        .for_each(|(x, y)| *x += y);
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], d));
            }
            Op::Concat(parts, axis) => {
                let (gm, gn) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let (pm, pn) = (pt.rows(), pt.cols());
                    let d = if *axis == 1 {
                        let mut d = Vec::with_capacity(pm * pn);
                        for r in 0..gm {
                            d.extend_from_slice(&g.data()[r * gn + offset..r * gn + offset + pn]);
                        }
                        offset += pn;
                        d
                    } else {
                        let d = g.data()[offset * gn..(offset + pm) * gn].to_vec();
                        offset += pm;
                        d
                    };
                    self.accumulate(grads, p, Tensor::from_parts(vec![pm, pn], d));
                }
            }
        }
    }
}
