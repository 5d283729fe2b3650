use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::SymmetricEigen;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geom::Mat3;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Silu(Var),
    Softplus(Var),
    Log1p(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    GatherCols(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    Dot(Var, Var),
    SqNorm(Var),
    Trace(Var),
    Huber(Var, f64),
    RowNorm(Var),
    PsdClamp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of tensor operations in creation (hence topological) order.
///
/// A node is tracked when gradient recording is enabled and at least one of
/// its inputs is tracked; untracked nodes keep no parent links.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// C = A·B (+ beta·C) with explicit strides; dims: A is m×k, B is k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64], beta: f64) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides address only elements within `a`, `b` and `c`,
    // whose lengths match the dimensions checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn mat3_from_row(r: &[f64]) -> Mat3 {
    Mat3::from_row_slice(r)
}

fn push_mat3(out: &mut Vec<f64>, m: &Mat3) {
    for i in 0..3 {
        for j in 0..3 {
            out.push(m[(i, j)]);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, backward_done: false, params: Vec::new(), param_index: HashMap::new() }
    }

    /// Graph that never records operations; every node is a constant.
    pub fn no_grad() -> Self {
        Graph { grad_enabled: false, ..Graph::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Runs `f` with recording disabled; results are value-only constants.
    pub fn with_no_grad<T>(&mut self, f: impl FnOnce(&mut Graph) -> T) -> T {
        let prev = std::mem::replace(&mut self.grad_enabled, false);
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let (op, tracked) = if tracked && self.grad_enabled { (op, true) } else { (Op::Constant, false) };
        self.nodes.push(Node { value, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable input (tracked when recording is enabled).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = self.grad_enabled;
        self.push(t, Op::Leaf, tracked)
    }

    /// Named trainable leaf; its gradient is reported by [`Graph::param_grads`].
    ///
    /// Repeated requests for the same name return the same node, so a weight
    /// shared by several layers or recycles accumulates a single gradient. A
    /// name first seen while recording was off is re-created as a tracked leaf
    /// once recording is back on.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            if self.nodes[v.0].tracked || !self.grad_enabled {
                return v;
            }
        }
        let v = self.leaf(t.clone());
        if self.grad_enabled {
            self.params.push((name.to_string(), v));
        }
        self.param_index.insert(name.to_string(), v);
        v
    }

    /// Registers existing nodes as the parameters with the given names.
    pub fn bind_params(&mut self, bindings: impl IntoIterator<Item = (String, Var)>) {
        for (name, v) in bindings {
            if self.nodes[v.0].tracked && !self.param_index.contains_key(&name) {
                self.params.push((name.clone(), v));
            }
            self.param_index.insert(name, v);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Gradient of every named parameter; zeros where no path reached it.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grad(*v).unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Value-identical copy that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn tracked_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn two_d(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let tracked = self.tracked_any(&[a]);
        self.push(out, op, tracked)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d("matmul", a)?;
        let (k2, n) = self.two_d("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k as isize, 1), self.value(b).data(), (n as isize, 1), &mut c, 0.0);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[n, m] + bias[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.two_d("add_row", x)?;
        if self.value(bias).numel() != m {
            return Err(shape_err("add_row", format!("[{n}, {m}] + bias of {} values", self.value(bias).numel())));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(m).flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y)).collect();
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::AddRow(x, bias), tracked))
    }

    /// `x[n, m] * c[n, 1]`, scaling each row.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, m) = self.two_d("mul_col", x)?;
        if self.value(c).numel() != n {
            return Err(shape_err("mul_col", format!("[{n}, {m}] * column of {} values", self.value(c).numel())));
        }
        let cv = self.value(c).data();
        let data = self.value(x).data().chunks(m).zip(cv).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect();
        let tracked = self.tracked_any(&[x, c]);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::MulCol(x, c), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// ln(1 + x); inputs must exceed −1.
    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > -1.0)) {
            return Err(shape_err("log1p", format!("argument {bad} outside (-1, inf)")));
        }
        Ok(self.unary(a, Op::Log1p(a), f64::ln_1p))
    }

    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(a, Op::Huber(a, delta), |x| huber(x, delta))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked_any(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked_any(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// `[n, m] → [n, 1]`
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.two_d("row_sum", a)?;
        let data = self.value(a).data().chunks(m).map(|r| r.iter().sum()).collect();
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, 1], data), Op::RowSum(a), tracked))
    }

    /// Euclidean norm of each row, `[n, m] → [n, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.two_d("row_norm", a)?;
        let data = self.value(a).data().chunks(m).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, 1], data), Op::RowNorm(a), tracked))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.two_d("concat", p)?);
        }
        let n = dims[0].0;
        if dims.iter().any(|d| d.0 != n) {
            return Err(shape_err("concat", format!("row counts {:?}", dims.iter().map(|d| d.0).collect::<Vec<_>>())));
        }
        let width: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for (&p, &(_, m)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[i * m..(i + 1) * m]);
            }
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(Tensor::from_parts(vec![n, width], data), Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Row selection `out[e] = x[idx[e]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let (n, m) = self.two_d("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {n} rows")));
        }
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list".into()));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            data.extend_from_slice(&xv[i * m..(i + 1) * m]);
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::from_parts(vec![idx.len(), m], data), Op::GatherRows(x, idx.clone()), tracked))
    }

    /// Column selection `out[:, c] = x[:, cols[c]]`.
    pub fn gather_cols(&mut self, x: Var, cols: &Arc<[usize]>) -> Result<Var> {
        let (n, m) = self.two_d("gather_cols", x)?;
        if cols.is_empty() || cols.iter().any(|&c| c >= m) {
            return Err(shape_err("gather_cols", format!("columns {cols:?} of {m}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            data.extend(cols.iter().map(|&c| xv[i * m + c]));
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, cols.len()], data), Op::GatherCols(x, cols.clone()), tracked))
    }

    /// Segment sum `out[idx[e]] += x[e]` into `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &Arc<[usize]>, n_out: usize) -> Result<Var> {
        let (e, m) = self.two_d("scatter_add_rows", x)?;
        if idx.len() != e || idx.iter().any(|&i| i >= n_out) || n_out == 0 {
            return Err(shape_err("scatter_add_rows", format!("{e} rows, {} indices, {n_out} outputs", idx.len())));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; n_out * m];
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..m {
                data[i * m + c] += xv[k * m + c];
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n_out, m], data), Op::ScatterAddRows(x, idx.clone()), tracked))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), tracked))
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let tracked = self.tracked_any(&[a]);
        self.push(Tensor::scalar(s), Op::SqNorm(a), tracked)
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.two_d("trace", a)?;
        if n != m {
            return Err(shape_err("trace", format!("non-square [{n}, {m}]")));
        }
        let s = (0..n).map(|i| self.value(a).data()[i * n + i]).sum();
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Trace(a), tracked))
    }

    /// Rows hold row-major 3×3 matrices; each is symmetrized and its
    /// eigenvalues are clamped at zero.
    pub fn psd_clamp(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.two_d("psd_clamp", a)?;
        if m != 9 {
            return Err(shape_err("psd_clamp", format!("rows of {m} values, expected 9")));
        }
        let mut data = Vec::with_capacity(n * 9);
        for r in self.value(a).data().chunks(9) {
            push_mat3(&mut data, &crate::geom::clamp_psd(&mat3_from_row(r)));
        }
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, 9], data), Op::PsdClamp(a), tracked))
    }

    /// Populates gradient slots of every tracked node with ∂loss/∂node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalarLoss(format!("shape {:?}", lv.shape())));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if self.nodes[i].tracked {
                for (parent, contrib) in self.pullback(i, &g) {
                    let slot = &mut self.nodes[parent.0].grad;
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        None => *slot = Some(contrib),
                    }
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient contributions of node `i` to its tracked parents.
    fn pullback(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.value(v).data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    // dA = G·Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), &mut ga, 0.0);
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    // dB = Aᵀ·G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), &mut gb, 0.0);
                    res.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                res.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
            }
            Op::AddRow(x, bias) => {
                let m = self.value(*bias).numel();
                res.push((*x, g.to_vec()));
                let mut gb = vec![0.0; m];
                for r in g.chunks(m) {
                    gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                res.push((*bias, gb));
            }
            Op::MulCol(x, c) => {
                let m = out.cols();
                let (xv, cv) = (val(*x), val(*c));
                res.push((*x, g.chunks(m).zip(cv).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect()));
                let gc = g.chunks(m).zip(xv.chunks(m)).map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum()).collect();
                res.push((*c, gc));
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|x| x * s).collect())),
            Op::Shift(a) => res.push((*a, g.to_vec())),
            Op::Silu(a) => {
                let gx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                res.push((*a, gx));
            }
            Op::Softplus(a) => res.push((*a, g.iter().zip(val(*a)).map(|(gi, &x)| gi * sigmoid(x)).collect())),
            Op::Log1p(a) => res.push((*a, g.iter().zip(val(*a)).map(|(gi, &x)| gi / (1.0 + x)).collect())),
            Op::Huber(a, delta) => {
                let gx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| gi * if x.abs() <= *delta { x } else { delta * x.signum() })
                    .collect();
                res.push((*a, gx));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::RowSum(a) => {
                let m = self.value(*a).cols();
                res.push((*a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, m)).collect()));
            }
            Op::RowNorm(a) => {
                let m = self.value(*a).cols();
                let gx = val(*a)
                    .chunks(m)
                    .zip(out.data())
                    .zip(g)
                    .flat_map(|((r, &nrm), &gi)| r.iter().map(move |x| if nrm > 0.0 { gi * x / nrm } else { 0.0 }))
                    .collect();
                res.push((*a, gx));
            }
            Op::ConcatCols(parts) => {
                let width = out.cols();
                let mut offset = 0;
                for p in parts {
                    let m = self.value(*p).cols();
                    if self.wants(*p) {
                        let gp = g.chunks(width).flat_map(|r| r[offset..offset + m].iter().copied()).collect();
                        res.push((*p, gp));
                    }
                    offset += m;
                }
            }
            Op::GatherRows(x, idx) => {
                let m = out.cols();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..m {
                        gx[r * m + c] += g[k * m + c];
                    }
                }
                res.push((*x, gx));
            }
            Op::GatherCols(x, cols) => {
                let m = self.value(*x).cols();
                let k = cols.len();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (i, r) in g.chunks(k).enumerate() {
                    for (c, &src) in cols.iter().enumerate() {
                        gx[i * m + src] += r[c];
                    }
                }
                res.push((*x, gx));
            }
            Op::ScatterAddRows(x, idx) => {
                let m = out.cols();
                let mut gx = Vec::with_capacity(idx.len() * m);
                for &r in idx.iter() {
                    gx.extend_from_slice(&g[r * m..(r + 1) * m]);
                }
                res.push((*x, gx));
            }
            Op::Dot(a, b) => {
                res.push((*a, val(*b).iter().map(|y| g[0] * y).collect()));
                res.push((*b, val(*a).iter().map(|y| g[0] * y).collect()));
            }
            Op::SqNorm(a) => res.push((*a, val(*a).iter().map(|x| 2.0 * g[0] * x).collect())),
            Op::Trace(a) => {
                let n = self.value(*a).rows();
                let mut gx = vec![0.0; n * n];
                for d in 0..n {
                    gx[d * n + d] = g[0];
                }
                res.push((*a, gx));
            }
            Op::PsdClamp(a) => {
                let mut gx = Vec::with_capacity(g.len());
                for (r, gr) in val(*a).chunks(9).zip(g.chunks(9)) {
                    push_mat3(&mut gx, &psd_clamp_pullback(&mat3_from_row(r), &mat3_from_row(gr)));
                }
                res.push((*a, gx));
            }
        }
        res.retain(|(v, _)| self.wants(*v));
        res
    }
}

/// Pullback of `A ↦ V·max(Λ, 0)·Vᵀ` with `V Λ Vᵀ = sym(A)`, via the
/// divided-difference (Daleckii–Krein) form of the spectral-function derivative.
fn psd_clamp_pullback(a: &Mat3, g: &Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(crate::geom::symmetrize(a));
    let (l, v) = (eig.eigenvalues, eig.eigenvectors);
    let f = |x: f64| x.max(0.0);
    let df = |x: f64| if x > 0.0 { 1.0 } else { 0.0 };
    let inner = v.transpose() * crate::geom::symmetrize(g) * v;
    let mut k = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let (li, lj) = (l[i], l[j]);
            let w = if (li - lj).abs() > 1e-12 { (f(li) - f(lj)) / (li - lj) } else { 0.5 * (df(li) + df(lj)) };
            k[(i, j)] = w * inner[(i, j)];
        }
    }
    crate::geom::symmetrize(&(v * k * v.transpose()))
}
