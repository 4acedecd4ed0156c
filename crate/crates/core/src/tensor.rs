//! Dense row-major `f64` matrices and a small reverse-mode tape.
//!
//! Every forward computation in the model is recorded on a [`Graph`]. A graph
//! borrows the [`ParamStore`] immutably, so building graphs never mutates
//! parameters; gradients come back as a [`Gradients`] value that the
//! optimizer consumes afterwards.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match buffer");
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Mat { rows: 1, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn stack_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    /// `self (m×k) · other (k×n)`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat { rows: m, cols: n, data: out }
    }

    /// `self (m×k) · otherᵀ (n×k)ᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Mat { rows: m, cols: n, data: out }
    }

    /// `selfᵀ (k×m)ᵀ · other (k×n)`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat { rows: m, cols: n, data: out }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact (erf-based) GeLU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Rows(Var, Vec<usize>),
    Mean(Vec<Var>),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropyLogits { logits: Var, targets: Vec<(usize, usize, f64)>, probs: Mat },
    NllProbs { probs: Var, targets: Vec<(usize, usize)> },
    Mse { x: Var, targets: Vec<(usize, Vec<f64>)> },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Reverse-mode tape. Parameters are looked up once per graph so that every
/// use of a parameter shares one leaf.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass.
pub struct Gradients {
    pub params: HashMap<ParamId, Mat>,
    inputs: HashMap<Var, Mat>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Mat> {
        self.inputs.get(&v)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant: receives no gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Sub(a, b))
    }

    /// Adds the `1×n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let vb = self.value(b);
        assert_eq!(vb.rows, 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, vb.cols, "bias width");
        for r in 0..out.rows {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scaled(s);
        self.push(out, Op::Scale(x, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, m: Mat) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), m.shape());
        let data = vx.data.iter().zip(&m.data).map(|(a, b)| a * b).collect();
        let out = Mat::from_vec(vx.rows, vx.cols, data);
        self.push(out, Op::MulConst(x, m))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Mat::from_vec(vx.rows, vx.cols, vx.data.iter().map(|&v| gelu(v)).collect());
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise softmax. Entries equal to `-inf` get exactly zero weight.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(DstError::Numeric("softmax over a fully masked row".into()));
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Sets masked columns to `-inf` (constant op, gradient flows to unmasked entries).
    pub fn mask_cols(&mut self, x: Var, allowed: &[bool]) -> Var {
        let mut mask = Mat::filled(self.value(x).rows, self.value(x).cols, 1.0);
        assert_eq!(allowed.len(), mask.cols, "mask length");
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            for (c, &ok) in allowed.iter().enumerate() {
                if !ok {
                    out.set(r, c, f64::NEG_INFINITY);
                    mask.set(r, c, 0.0);
                }
            }
        }
        // Gradient of a masked entry is zero; reuse MulConst for the backward rule.
        self.push(out, Op::MulConst(x, mask))
    }

    /// Row-wise layer normalisation with learned gain and bias (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols);
        let mut out = Mat::zeros(vx.rows, len);
        for r in 0..vx.rows {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "stack_rows width mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    /// Gathers rows by index (duplicates allowed); embedding lookup is this op on a table.
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let mut out = Mat::zeros(idx.len(), vx.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(vx.row(i));
        }
        self.push(out, Op::Rows(x, idx.to_vec()))
    }

    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        let out = out.scaled(1.0 / parts.len() as f64);
        self.push(out, Op::Mean(parts.to_vec()))
    }

    /// `Σ w_i · s_i` over `1×1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        for &(v, w) in terms {
            let vv = self.value(v);
            assert_eq!(vv.shape(), (1, 1), "weighted_sum expects scalars");
            s += w * vv.data[0];
        }
        self.push(Mat::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    /// `Σ_(row, class, weight) −weight · log softmax(logits[row])[class]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[(usize, usize, f64)]) -> Var {
        let vl = self.value(logits);
        let mut probs = vl.clone();
        for r in 0..probs.rows {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let mut loss = 0.0;
        for &(r, c, w) in targets {
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[c]);
        }
        self.push(Mat::scalar(loss), Op::CrossEntropyLogits { logits, targets: targets.to_vec(), probs })
    }

    /// `Σ_(row, class) −log p[row, class]` on an already-normalised matrix.
    pub fn nll_probs(&mut self, probs: Var, targets: &[(usize, usize)]) -> Var {
        let vp = self.value(probs);
        let loss = targets.iter().map(|&(r, c)| -vp.get(r, c).max(f64::MIN_POSITIVE).ln()).sum();
        self.push(Mat::scalar(loss), Op::NllProbs { probs, targets: targets.to_vec() })
    }

    /// `Σ_(row, target) mean_j (x[row, j] − target_j)²`.
    pub fn mse_rows(&mut self, x: Var, targets: Vec<(usize, Vec<f64>)>) -> Var {
        let vx = self.value(x);
        let mut loss = 0.0;
        for (r, t) in &targets {
            assert_eq!(t.len(), vx.cols, "mse target width");
            let row = vx.row(*r);
            loss += row.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
        }
        self.push(Mat::scalar(loss), Op::Mse { x, targets })
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward from a non-scalar");
        self.backward_with(&[(out, Mat::scalar(1.0))])
    }

    /// Backpropagates arbitrary upstream gradients seeded at several nodes.
    pub fn backward_with(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        let mut result = Gradients { params: HashMap::new(), inputs: HashMap::new() };
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Input => {
                    result.inputs.insert(Var(i), g);
                }
                Op::Param(id) => {
                    result.params.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scaled(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(x, b) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scaled(*s)),
                Op::MulConst(x, m) => {
                    let data = g.data.iter().zip(&m.data).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let data = g.data.iter().zip(&vx.data).map(|(d, &v)| d * gelu_grad(v)).collect();
                    accumulate(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut dx = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let s = dot(pr, gr);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = pr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = xhat.shape();
                    let mut dgain = Mat::zeros(1, cols);
                    let mut dbias = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            dgain.data[c] += gr[c] * xr[c];
                            dbias.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xr) / cols as f64;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut dp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::SliceCols(x, start) => {
                    let vx = self.value(*x);
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..g.rows {
                        dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::StackRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let dp = Mat::from_vec(rows, g.cols, g.data[off * g.cols..(off + rows) * g.cols].to_vec());
                        off += rows;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::Rows(x, idx) => {
                    let vx = self.value(*x);
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for (o, &r) in idx.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(o)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mean(parts) => {
                    let dg = g.scaled(1.0 / parts.len() as f64);
                    for &p in parts {
                        accumulate(&mut grads, p, dg.clone());
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Mat::scalar(w * g.data[0]));
                    }
                }
                Op::CrossEntropyLogits { logits, targets, probs } => {
                    let up = g.data[0];
                    let mut dl = Mat::zeros(probs.rows, probs.cols);
                    for &(r, c, w) in targets {
                        for (j, d) in dl.row_mut(r).iter_mut().enumerate() {
                            let ind = if j == c { 1.0 } else { 0.0 };
                            *d += up * w * (probs.get(r, j) - ind);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::NllProbs { probs, targets } => {
                    let up = g.data[0];
                    let vp = self.value(*probs);
                    let mut dp = Mat::zeros(vp.rows, vp.cols);
                    for &(r, c) in targets {
                        let p = vp.get(r, c).max(f64::MIN_POSITIVE);
                        dp.set(r, c, dp.get(r, c) - up / p);
                    }
                    accumulate(&mut grads, *probs, dp);
                }
                Op::Mse { x, targets } => {
                    let up = g.data[0];
                    let vx = self.value(*x);
                    let mut dx = Mat::zeros(vx.rows, vx.cols);
                    for (r, t) in targets {
                        let n = t.len() as f64;
                        let row = vx.row(*r).to_vec();
                        for (j, d) in dx.row_mut(*r).iter_mut().enumerate() {
                            *d += up * 2.0 * (row[j] - t[j]) / n;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        result
    }
}

/// Largest elementwise relative error between analytic and central
/// finite-difference gradients of the scalar built by `f`. Entries whose
/// magnitude is below `1e-6` on both sides are compared absolutely.
pub fn gradient_check<F>(store: &mut ParamStore, ids: &[ParamId], f: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out).params
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let o = f(&mut g);
        g.scalar(o)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &id in ids {
        for k in 0..store.get(id).data.len() {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data[k] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data[k] = orig;
            let num = (plus - minus) / (2.0 * h);
            let ana = analytic.get(&id).map_or(0.0, |m| m.data[k]);
            let denom = num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max((num - ana).abs() / denom);
        }
    }
    worst
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(mats: Vec<Mat>) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::default();
        let ids = mats.into_iter().enumerate().map(|(i, m)| store.add(&format!("p{i}"), m, false)).collect();
        (store, ids)
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(3, 4, 1);
        let b = m(4, 5, 2);
        let bt = {
            let mut t = Mat::zeros(5, 4);
            for i in 0..4 {
                for j in 0..5 {
                    t.set(j, i, b.get(i, j));
                }
            }
            t
        };
        let c1 = a.matmul(&b);
        let c2 = a.matmul_t(&bt);
        for (x, y) in c1.data.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = {
            let mut t = Mat::zeros(4, 3);
            for i in 0..3 {
                for j in 0..4 {
                    t.set(j, i, a.get(i, j));
                }
            }
            t
        };
        let c3 = at.t_matmul(&b);
        for (x, y) in c1.data.iter().zip(&c3.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_of_elementary_ops() {
        let (mut store, ids) = store_with(vec![m(3, 4, 3), m(4, 4, 4), m(1, 4, 5), m(1, 4, 6), m(2, 4, 7)]);
        let ids2 = ids.clone();
        let err = gradient_check(&mut store, &ids, move |g| {
            let x = g.param(ids2[0]);
            let w = g.param(ids2[1]);
            let b = g.param(ids2[2]);
            let gain = g.param(ids2[3]);
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            let y = g.gelu(y);
            let y = g.layer_norm(y, gain, b);
            let other = g.param(ids2[4]);
            let s = g.matmul_t(y, other);
            let s = g.scale(s, 0.7);
            let s = g.mask_cols(s, &[true, false]);
            let p = g.softmax(s).unwrap();
            let cat = g.concat_cols(&[y, p]);
            let sl = g.slice_cols(cat, 1, 3);
            let st = g.stack_rows(&[sl, sl]);
            let r = g.rows(st, &[0, 4, 4]);
            let mn = g.mean(&[r, r]);
            let l1 = g.mse_rows(mn, vec![(0, vec![0.1, 0.2, 0.3]), (2, vec![0.0, 1.0, 0.0])]);
            let l2 = g.cross_entropy_logits(y, &[(0, 1, 0.1), (2, 3, 1.0)]);
            let sm = g.softmax(y).unwrap();
            let l3 = g.nll_probs(sm, &[(1, 2)]);
            let d = g.sub(y, y);
            let l4 = g.mse_rows(d, vec![(0, vec![0.0; 4])]);
            g.weighted_sum(&[(l1, 1.0), (l2, 0.5), (l3, 0.25), (l4, 1.0)])
        });
        assert!(err < 1e-5, "relative gradient error {err}");
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::row_vector(vec![1.0, 2.0, 3.0]));
        let x = g.mask_cols(x, &[true, false, true]);
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p).data[1], 0.0);
        let s: f64 = g.value(p).data.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        let x = g.constant(Mat::row_vector(vec![1.0]));
        let x = g.mask_cols(x, &[false]);
        assert!(g.softmax(x).is_err());
    }
}
