//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation executed during a forward pass in
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! returns the gradient of a scalar loss with respect to every leaf that
//! requires a gradient.
//!
//! Binary element-wise ops broadcast their *right* operand: it may have the
//! same shape as the left one, be a `1xc` row, an `rx1` column, or a `1x1`
//! scalar.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    GroupSumRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    BceLogits(Var, Vec<f64>),
    Allocation(Var, Vec<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&Tensor> {
        self.leaves
            .get(&var.0)
            .ok_or_else(|| Error::MissingGradient(format!("node #{}", var.0)))
    }

    /// Gradients of every parameter registered on the tape. Parameters the
    /// loss does not depend on are absent.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(&v.0).map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.leaves.get(&v.0))
    }
}

/// The operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_index: BTreeMap<ParamId, Var>,
    consumed: bool,
}

#[inline]
fn bidx(b_rows: usize, b_cols: usize, r: usize, c: usize) -> usize {
    (r % b_rows) * b_cols + (c % b_cols)
}

const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside `(0, 1)` at saturation.
#[inline]
fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    y.clamp(SIGMOID_LO, SIGMOID_HI)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable parameter. Registering the same id twice
    /// returns the same node, so shared parameters accumulate gradients
    /// from every use.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(v) = self.param_index.get(&id) {
            return *v;
        }
        let v = self.leaf(value.clone());
        self.params.push((id, v));
        self.param_index.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.shape(a);
        let (q2, r) = self.shape(b);
        if q != q2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: (p, q),
                rhs: (q2, r),
            });
        }
        let mut out = vec![0.0; p * r];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            p,
            q,
            r,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(p, r, out)?, Op::MatMul(a, b), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let ok = (br == ar || br == 1) && (bc == ac || bc == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                lhs: (ar, ac),
                rhs: (br, bc),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_broadcast(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let (rows, cols) = av.shape();
        let (br, bc) = bv.shape();
        let out: Vec<f64> = if (br, bc) == (rows, cols) {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.push(f(av.get(r, c), bv.data()[bidx(br, bc, r, c)]));
                }
            }
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(rows, cols, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// `k - a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, k)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let f = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => libm::tanh,
            Activation::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
        };
        self.unary(a, f, Op::Act(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, libm::log, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, libm::sqrt, Op::Sqrt(a))
    }

    /// `max(a, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| if x < floor { floor } else { x }, Op::ClampMin(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row: `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let out: Vec<f64> = (0..rows).map(|r| v.row_slice(r).iter().sum()).collect();
        let rg = self.rg(&[a]);
        let t = Tensor::new(rows, 1, out).expect("rows > 0");
        let _ = cols;
        self.push(t, Op::SumRows(a), rg)
    }

    /// Sums each column: `r x c -> 1 x c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(1, cols, out).expect("cols > 0"), Op::SumCols(a), rg)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(rows, cols, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if len == 0 || start + len > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: (rows, cols),
                rhs: (start, len),
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(rows, len, out)?, Op::SliceCols(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Repeats every row `k` times consecutively: `r x c -> (r*k) x c`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let mut out = Vec::with_capacity(rows * k * cols);
        for r in 0..rows {
            for _ in 0..k {
                out.extend_from_slice(v.row_slice(r));
            }
        }
        let rg = self.rg(&[a]);
        let t = Tensor::new(rows * k, cols, out).expect("k > 0");
        self.push(t, Op::RepeatRows(a, k), rg)
    }

    /// Stacks `k` copies of the whole matrix: `r x c -> (k*r) x c`.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let v = self.value(a);
        let (rows, cols) = v.shape();
        let mut out = Vec::with_capacity(rows * k * cols);
        for _ in 0..k {
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(&[a]);
        let t = Tensor::new(rows * k, cols, out).expect("k > 0");
        self.push(t, Op::TileRows(a, k), rg)
    }

    /// Sums consecutive groups of `k` rows: `(g*k) x c -> g x c`.
    pub fn group_sum_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if k == 0 || rows % k != 0 {
            return Err(Error::Dimension {
                op: "group_sum_rows",
                lhs: (rows, cols),
                rhs: (k, 1),
            });
        }
        let v = self.value(a);
        let groups = rows / k;
        let mut out = vec![0.0; groups * cols];
        for r in 0..rows {
            let g = r / k;
            for (o, x) in out[g * cols..(g + 1) * cols].iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(groups, cols, out)?, Op::GroupSumRows(a, k), rg))
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "lookup index {bad} outside table of {rows} rows"
            )));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(v.row_slice(i));
        }
        let rg = self.rg(&[table]);
        let t = Tensor::new(indices.len(), cols, out)?;
        Ok(self.push(t, Op::GatherRows(table, indices.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Per-element binary cross entropy of `sigmoid(logits)` against
    /// `targets`, computed in the stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != targets.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: v.shape(),
                rhs: (targets.len(), 1),
            });
        }
        let out: Vec<f64> = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_logit(z, y))
            .collect();
        let t = Tensor::new(v.rows(), v.cols(), out)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::BceLogits(logits, targets.to_vec()), rg))
    }

    /// Dynamic allocation weighting over usage rows (`batch x n`).
    ///
    /// Locations are visited in ascending usage order (stable on ties);
    /// location `j` in that order receives `(1 - u_j) * prod_{k<j} u_k`.
    pub fn allocation(&mut self, usage: Var) -> Var {
        let u = self.value(usage);
        let (rows, n) = u.shape();
        let mut out = vec![0.0; rows * n];
        let mut orders = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = u.row_slice(r);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            let mut prod = 1.0;
            for &loc in &order {
                out[r * n + loc] = (1.0 - row[loc]) * prod;
                prod *= row[loc];
            }
            orders.push(order);
        }
        let rg = self.rg(&[usage]);
        let t = Tensor::new(rows, n, out).expect("usage shape");
        self.push(t, Op::Allocation(usage, orders), rg)
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    ///
    /// The tape can be differentiated once; a second call fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::MissingGradient(
                "loss does not depend on any differentiable leaf".to_string(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut leaves = BTreeMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                leaves.insert(idx, g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::zeros(r, c)
    }

    /// Reduces a gradient of the broadcast result back onto `b`'s shape.
    fn reduce_to(&self, b: Var, g: &Tensor, f: impl Fn(usize, usize, f64) -> f64) -> Tensor {
        let (br, bc) = self.shape(b);
        let mut out = Tensor::zeros(br, bc);
        let (rows, cols) = g.shape();
        let od = out.data_mut();
        for r in 0..rows {
            for c in 0..cols {
                od[bidx(br, bc, r, c)] += f(r, c, g.get(r, c));
            }
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.shape(*a);
                let r = self.shape(*b).1;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; p * q];
                    matmul_nt_into(g.data(), self.value(*b).data(), &mut ga, p, q, r);
                    self.accumulate(grads, *a, Tensor::new(p, q, ga).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; q * r];
                    matmul_tn_into(self.value(*a).data(), g.data(), &mut gb, p, q, r);
                    self.accumulate(grads, *b, Tensor::new(q, r, gb).expect("shape"));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(*b, g, |_, _, x| sign * x);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (br, bc) = bv.shape();
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    let (rows, cols) = ga.shape();
                    let d = ga.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] *= bv.data()[bidx(br, bc, r, c)];
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(*b, g, |r, c, x| x * av.get(r, c));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (br, bc) = bv.shape();
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    let (rows, cols) = ga.shape();
                    let d = ga.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] /= bv.data()[bidx(br, bc, r, c)];
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(*b, g, |r, c, x| {
                        let bb = bv.data()[bidx(br, bc, r, c)];
                        -x * av.get(r, c) / (bb * bb)
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Act(a, kind) => {
                let ga = zip_map(g, y, |gi, yi| match kind {
                    Activation::Sigmoid => gi * yi * (1.0 - yi),
                    Activation::Tanh => gi * (1.0 - yi * yi),
                    Activation::Relu => {
                        if yi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_map(g, self.value(*a), |gi, xi| gi * sigmoid(xi));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * yi)),
            Op::Ln(a) => {
                let ga = zip_map(g, self.value(*a), |gi, xi| gi / xi);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = zip_map(g, y, |gi, yi| if yi > 0.0 { 0.5 * gi / yi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let ga = zip_map(g, self.value(*a), |gi, xi| if xi < *floor { 0.0 } else { gi });
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = y.shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        ga.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.requires_grad(p) {
                        let gp = Tensor::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = self.zeros_like(*a);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let ga = g.clone().reshape(r, c).expect("same length");
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatRows(a, k) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows * k {
                    let src = r / k;
                    for c in 0..cols {
                        let cur = ga.get(src, c);
                        ga.set(src, c, cur + g.get(r, c));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TileRows(a, k) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for copy in 0..*k {
                    let chunk = &g.data()[copy * rows * cols..(copy + 1) * rows * cols];
                    for (o, x) in ga.data_mut().iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GroupSumRows(a, k) => {
                let (rows, cols) = self.shape(*a);
                let ga = Tensor::from_fn(rows, cols, |r, c| g.get(r / k, c));
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, indices) => {
                let mut ga = self.zeros_like(*table);
                let cols = ga.cols();
                for (i, &row) in indices.iter().enumerate() {
                    for c in 0..cols {
                        let cur = ga.get(row, c);
                        ga.set(row, c, cur + g.get(i, c));
                    }
                }
                self.accumulate(grads, *table, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::BceLogits(z, targets) => {
                let zv = self.value(*z);
                let mut gz = g.clone();
                for ((o, &zi), &t) in gz.data_mut().iter_mut().zip(zv.data()).zip(targets) {
                    *o *= sigmoid(zi) - t;
                }
                self.accumulate(grads, *z, gz);
            }
            Op::Allocation(usage, orders) => {
                let u = self.value(*usage);
                let (rows, n) = u.shape();
                let mut gu = Tensor::zeros(rows, n);
                for r in 0..rows {
                    let row = u.row_slice(r);
                    let order = &orders[r];
                    let ga = g.row_slice(r);
                    let mut prefix = 1.0;
                    for k in 0..n {
                        let loc_k = order[k];
                        // d a[loc_k] / d u[loc_k]
                        let mut acc = -ga[loc_k] * prefix;
                        let mut mid = 1.0;
                        for &loc_j in &order[k + 1..] {
                            acc += ga[loc_j] * (1.0 - row[loc_j]) * prefix * mid;
                            mid *= row[loc_j];
                        }
                        gu.set(r, loc_k, acc);
                        prefix *= row[loc_k];
                    }
                }
                self.accumulate(grads, *usage, gu);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

#[inline]
pub(crate) fn bce_logit(z: f64, y: f64) -> f64 {
    let relu = if z > 0.0 { z } else { 0.0 };
    relu - z * y + libm::log1p(libm::exp(-libm::fabs(z)))
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = libm::exp(v - max);
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    Tensor::new(rows, cols, out).expect("same shape")
}

/// Element-wise activation on a plain tensor.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.activation(v, kind);
    g.value(y).clone()
}

/// Row-wise stabilised softmax on a plain tensor.
pub fn softmax_row(x: &Tensor) -> Tensor {
    softmax_rows(x)
}

pub(crate) fn scalar_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

pub(crate) fn scalar_softplus(x: f64) -> f64 {
    softplus(x)
}
