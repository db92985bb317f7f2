//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! depends on a trainable leaf.
//!
//! ```
//! use aqa_causal::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0), true);
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    PairwiseSum(Var, Var, usize),
    BlockAggregate(Var, Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.get(name)?.clone(), true);
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (ta.as_matrix_shape(), tb.as_matrix_shape());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.as_matrix_shape() != tb.as_matrix_shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("add_row", a, row, |x, y| x + y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a[m×n] ⊙ row[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("mul_row", a, row, |x, y| x * y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    fn broadcast_row(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(op, ta, tr));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % n]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// `a · s` where `s` is a 1×1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("scale_by", self.value(a), ts));
        }
        let k = ts.item();
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise power for non-negative inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, move |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} out of range for {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let out = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                t.shape()
            )));
        }
        let data = (0..t.rows())
            .flat_map(|r| t.row(r)[start..end].iter().copied())
            .collect();
        let out = Tensor::matrix(t.rows(), end - start, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows indices out of range for {:?}",
                t.shape()
            )));
        }
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::matrix(idx.len(), t.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Row-wise softmax of `logits + mask`, where `mask` holds `0` or `-inf`.
    /// Masked entries come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = mask {
            if m.as_matrix_shape() != t.as_matrix_shape() {
                return Err(shape_err("softmax_masked", t, m));
            }
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let allowed = |c: usize| mask.map_or(true, |m| m.get(r, c) == 0.0);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if allowed(c) {
                    max = max.max(t.get(r, c));
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut z = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (t.get(r, c) - max).exp();
                    out[r * cols + c] = e;
                    z += e;
                }
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalisation followed by a learnable affine map.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        for p in [scale, shift] {
            let tp = self.value(p);
            if tp.rows() != 1 || tp.cols() != n {
                return Err(shape_err("layer_norm", t, tp));
            }
        }
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// For node blocks of size `n`: row `(b·n+i)·n + j` of the output is
    /// `p[b·n+i] + q[b·n+j]`. Used to form all pairwise attention inputs of
    /// a block-diagonal graph in one node.
    pub fn pairwise_sum(&mut self, p: Var, q: Var, n: usize) -> Result<Var> {
        self.same_shape("pairwise_sum", p, q)?;
        let (tp, tq) = (self.value(p), self.value(q));
        if n == 0 || tp.rows() % n != 0 {
            return Err(Error::invalid(format!(
                "pairwise_sum block {n} does not divide {} rows",
                tp.rows()
            )));
        }
        let (rows, h) = (tp.rows(), tp.cols());
        let mut data = Vec::with_capacity(rows * n * h);
        for block in 0..rows / n {
            for i in 0..n {
                let pi = tp.row(block * n + i);
                for j in 0..n {
                    let qj = tq.row(block * n + j);
                    data.extend(pi.iter().zip(qj).map(|(a, b)| a + b));
                }
            }
        }
        let out = Tensor::matrix(rows * n, h, data)?;
        let rg = self.rg(&[p, q]);
        Ok(self.push(out, Op::PairwiseSum(p, q, n), rg))
    }

    /// Block-diagonal aggregation: `out[b·n+i] = Σ_j alpha[b·n+i, j] · v[b·n+j]`.
    pub fn block_aggregate(&mut self, alpha: Var, v: Var, n: usize) -> Result<Var> {
        let (ta, tv) = (self.value(alpha), self.value(v));
        if ta.cols() != n || ta.rows() != tv.rows() || tv.rows() % n != 0 {
            return Err(shape_err("block_aggregate", ta, tv));
        }
        let (rows, d) = (tv.rows(), tv.cols());
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let base = (r / n) * n;
            let orow = &mut data[r * d..(r + 1) * d];
            for j in 0..n {
                let w = ta.get(r, j);
                for (o, x) in orow.iter_mut().zip(tv.row(base + j)) {
                    *o += w * x;
                }
            }
        }
        let out = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(&[alpha, v]);
        Ok(self.push(out, Op::BlockAggregate(alpha, v, n), rg))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(val(v).shape().to_vec(), data).expect("gradient matches value shape")
        };
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ([m, k], n) = (ta.as_matrix_shape(), tb.cols());
                acc(*a, like(*a, matmul_a_bt(gout.data(), tb.data(), m, n, k)));
                acc(*b, like(*b, matmul_at_b(ta.data(), gout.data(), m, k, n)));
            }
            Op::Transpose(a) => acc(*a, like(*a, gout.transpose().into_data())),
            Op::Add(a, b) => {
                acc(*a, like(*a, gout.data().to_vec()));
                acc(*b, like(*b, gout.data().to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, like(*a, gout.data().to_vec()));
                acc(*b, like(*b, gout.data().iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                acc(*a, like(*a, zip3(gout, val(*b), |g, x| g * x)));
                acc(*b, like(*b, zip3(gout, val(*a), |g, x| g * x)));
            }
            Op::AddRow(a, row) => {
                acc(*a, like(*a, gout.data().to_vec()));
                let n = gout.cols();
                let mut gr = vec![0.0; n];
                for (i, g) in gout.data().iter().enumerate() {
                    gr[i % n] += g;
                }
                acc(*row, like(*row, gr));
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let n = gout.cols();
                let ga = gout
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * tr.data()[i % n])
                    .collect();
                acc(*a, like(*a, ga));
                let mut gr = vec![0.0; n];
                for (i, (g, x)) in gout.data().iter().zip(ta.data()).enumerate() {
                    gr[i % n] += g * x;
                }
                acc(*row, like(*row, gr));
            }
            Op::Scale(a, k) => acc(*a, like(*a, gout.data().iter().map(|g| g * k).collect())),
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                acc(*a, like(*a, gout.data().iter().map(|g| g * k).collect()));
                let gs = gout
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| g * x)
                    .sum();
                acc(*s, like(*s, vec![gs]));
            }
            Op::Sigmoid(a) => acc(*a, like(*a, zip3(gout, y, |g, s| g * s * (1.0 - s)))),
            Op::LogSigmoid(a) => acc(
                *a,
                like(*a, zip3(gout, val(*a), |g, x| g * sigmoid(-x))),
            ),
            Op::Elu(a) => acc(
                *a,
                like(
                    *a,
                    zip3(gout, val(*a), |g, x| if x > 0.0 { g } else { g * x.exp() }),
                ),
            ),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                like(
                    *a,
                    zip3(gout, val(*a), |g, x| if x >= 0.0 { g } else { g * slope }),
                ),
            ),
            Op::Exp(a) => acc(*a, like(*a, zip3(gout, y, |g, e| g * e))),
            Op::Log(a) => acc(*a, like(*a, zip3(gout, val(*a), |g, x| g / x))),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                like(
                    *a,
                    zip3(gout, val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
                ),
            ),
            Op::Pow(a, p) => acc(
                *a,
                like(
                    *a,
                    zip3(gout, val(*a), |g, x| {
                        if *p == 0.0 {
                            0.0
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    }),
                ),
            ),
            Op::Sum(a) => {
                let g = gout.item();
                acc(*a, val(*a).map(|_| g));
            }
            Op::Mean(a) => {
                let g = gout.item() / val(*a).len() as f64;
                acc(*a, val(*a).map(|_| g));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let data = (0..gout.rows())
                        .flat_map(|r| gout.row(r)[offset..offset + w].iter().copied())
                        .collect();
                    acc(p, like(p, data));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, like(p, gout.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let mut g = vec![0.0; ta.len()];
                let off = start * ta.cols();
                g[off..off + gout.len()].copy_from_slice(gout.data());
                acc(*a, like(*a, g));
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let mut g = vec![0.0; ta.len()];
                let (c, w) = (ta.cols(), gout.cols());
                for r in 0..ta.rows() {
                    g[r * c + start..r * c + start + w].copy_from_slice(gout.row(r));
                }
                acc(*a, like(*a, g));
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut g = vec![0.0; ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, src) in g[i * c..(i + 1) * c].iter_mut().zip(gout.row(k)) {
                        *dst += src;
                    }
                }
                acc(*a, like(*a, g));
            }
            Op::Reshape(a) => acc(*a, like(*a, gout.data().to_vec())),
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut g = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gout.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, like(*a, g));
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let n = gout.cols();
                let gamma = val(*scale).data();
                let mut gx = vec![0.0; gout.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..gout.rows() {
                    let gr = gout.row(r);
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..n {
                        gb[c] += gr[c];
                        gg[c] += gr[c] * hr[c];
                        let dh = gr[c] * gamma[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let k = inv_std[r] / n as f64;
                    for c in 0..n {
                        let dh = gr[c] * gamma[c];
                        gx[r * n + c] = k * (n as f64 * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                acc(*x, like(*x, gx));
                acc(*scale, like(*scale, gg));
                acc(*shift, like(*shift, gb));
            }
            Op::PairwiseSum(p, q, n) => {
                let tp = val(*p);
                let (rows, h) = (tp.rows(), tp.cols());
                let mut gp = vec![0.0; rows * h];
                let mut gq = vec![0.0; rows * h];
                for block in 0..rows / n {
                    for i in 0..*n {
                        for j in 0..*n {
                            let go = gout.row((block * n + i) * n + j);
                            let (pi, qj) = ((block * n + i) * h, (block * n + j) * h);
                            for c in 0..h {
                                gp[pi + c] += go[c];
                                gq[qj + c] += go[c];
                            }
                        }
                    }
                }
                acc(*p, like(*p, gp));
                acc(*q, like(*q, gq));
            }
            Op::BlockAggregate(alpha, v, n) => {
                let (ta, tv) = (val(*alpha), val(*v));
                let (rows, d) = (tv.rows(), tv.cols());
                let mut galpha = vec![0.0; ta.len()];
                let mut gv = vec![0.0; tv.len()];
                for r in 0..rows {
                    let base = (r / n) * n;
                    let go = gout.row(r);
                    for j in 0..*n {
                        let vj = tv.row(base + j);
                        galpha[r * n + j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let w = ta.get(r, j);
                        for c in 0..d {
                            gv[(base + j) * d + c] += w * go[c];
                        }
                    }
                }
                acc(*alpha, like(*alpha, galpha));
                acc(*v, like(*v, gv));
            }
        }
    }

    /// `(name, gradient)` for every bound parameter. Parameters that did not
    /// influence `loss` get a zero gradient.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| self.value(*v).map(|_| 0.0));
                (name.clone(), g)
            })
            .collect()
    }
}

fn zip3(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chained_scalar_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.5), true);
        let e = g.exp(x);
        let y = g.mul(e, x).unwrap();
        let grads = g.backward(y).unwrap();
        let expect = 0.5f64.exp() * 1.5;
        assert!((grads.get(x).unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(1.0), true);
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn param_binding_is_cached() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        assert_eq!(g.bound_params().len(), 1);
        assert!(matches!(
            g.param(&store, "nope"),
            Err(Error::UnknownParameter(_))
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![-800.0, 0.0, 800.0]).unwrap());
        let y = g.log_sigmoid(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], -800.0);
        assert!((v[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }
}
