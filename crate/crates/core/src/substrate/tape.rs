//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and only propagates into nodes that were
//! created with `requires_grad` (directly or through an input), so frozen
//! weights and constants cost nothing on the way back.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    RowNorms(Var),
    Ln(Var),
    ClampMin(Var, f64),
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

/// Gradients of leaf nodes after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        bail!(Dimension, "{what}: expected a matrix, got shape {:?}", t.shape());
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            bail!(Dimension, "matmul: inner dims {k} and {k2} differ");
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_bt lhs")?;
        let (n, k2) = dims2(self.value(b), "matmul_bt rhs")?;
        if k != k2 {
            bail!(Dimension, "matmul_bt: inner dims {k} and {k2} differ");
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Elementwise product with a constant factor vector (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.len() {
            bail!(Dimension, "mul_const: {} factors for {} values", factors.len(), t.len());
        }
        let data = t.data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, factors), rg))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row")?;
        if self.value(b).len() != n {
            bail!(Dimension, "add_row: bias of {} for {n} columns", self.value(b).len());
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, b), rg))
    }

    /// `x[m×n] + b[m]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_col")?;
        if self.value(b).len() != m {
            bail!(Dimension, "add_col: bias of {} for {m} rows", self.value(b).len());
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (row, bv) in data.chunks_mut(n).zip(bias) {
            for v in row.iter_mut() {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddCol(x, b), rg))
    }

    /// Temporal convolution of `x[C_in × L]` with `w[C_out × C_in × K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, len) = dims2(self.value(x), "conv1d input")?;
        let ws = self.value(w).shape();
        if ws.len() != 3 || ws[1] != c_in {
            bail!(Dimension, "conv1d: weight {:?} does not match {c_in} input channels", ws);
        }
        if stride == 0 {
            bail!(Config, "conv1d: stride must be positive");
        }
        let (c_out, k) = (ws[0], ws[2]);
        if len + 2 * padding < k {
            bail!(Dimension, "conv1d: kernel {k} longer than padded input {}", len + 2 * padding);
        }
        let l_out = (len + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; c_out * l_out];
        for o in 0..c_out {
            let out_row = &mut out[o * l_out..(o + 1) * l_out];
            for c in 0..c_in {
                let x_row = &xd[c * len..(c + 1) * len];
                for j in 0..k {
                    let wv = wd[(o * c_in + c) * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for (t, ov) in out_row.iter_mut().enumerate() {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *ov += wv * x_row[pos as usize];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![c_out, l_out], out)?, Op::Conv1d { x, w, stride, padding }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), math::ln)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| if x > lo { x } else { lo })
    }

    /// Softmax over the last axis (rows of a matrix, or a whole vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalisation with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            bail!(Dimension, "layer_norm: affine params do not match width {n}");
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// `out[i] = x[index[i]]` over the flat data, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            bail!(Dimension, "gather: shape {:?} does not hold {} indices", shape, index.len());
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            bail!(Dimension, "gather: index {bad} out of range {}", t.len());
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if start >= end || end > n {
            bail!(Dimension, "slice_cols: [{start}, {end}) outside {n} columns");
        }
        let w = end - start;
        let index = (0..m).flat_map(|i| (start..end).map(move |j| i * n + j)).collect();
        self.gather(x, index, vec![m, w])
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_rows")?;
        if start >= end || end > m {
            bail!(Dimension, "slice_rows: [{start}, {end}) outside {m} rows");
        }
        self.gather(x, (start * n..end * n).collect(), vec![end - start, n])
    }

    /// Concatenate matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            bail!(Dimension, "concat: no inputs");
        }
        let mut shapes = Vec::with_capacity(parts.len());
        for &p in parts {
            shapes.push(dims2(self.value(p), "concat")?);
        }
        let out = match axis {
            0 => {
                let n = shapes[0].1;
                if shapes.iter().any(|s| s.1 != n) {
                    bail!(Dimension, "concat rows: column counts differ");
                }
                let m: usize = shapes.iter().map(|s| s.0).sum();
                let mut data = Vec::with_capacity(m * n);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![m, n], data)?
            }
            1 => {
                let m = shapes[0].0;
                if shapes.iter().any(|s| s.0 != m) {
                    bail!(Dimension, "concat cols: row counts differ");
                }
                let n: usize = shapes.iter().map(|s| s.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            _ => bail!(Dimension, "concat: axis {axis} unsupported"),
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of every row: `[m×n] → [m]`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let data: Vec<f64> = t
            .data()
            .chunks(n)
            .map(|r| math::sqrt(r.iter().map(|v| v * v).sum()))
            .collect();
        let m = data.len();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m], data).expect("rows"), Op::RowNorms(a), rg)
    }

    /// Back-propagate from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            bail!(Dimension, "backward: loss must be a single value, got shape {:?}", lt.shape());
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric(alloc::format!("non-finite loss {}", lt.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if need(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    matmul_bt_acc(g, val(*b).data(), ga, m, n, k);
                }
                if need(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    matmul_at_acc(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if need(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    matmul_acc(g, val(*b).data(), ga, m, n, k);
                }
                if need(*b) {
                    let gb = accumulate(grads, *b, n * k);
                    matmul_at_acc(g, val(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if need(v) {
                        add_scaled(accumulate(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if need(v) {
                        add_scaled(accumulate(grads, v, g.len()), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let bd = val(*b).data();
                    let ga = accumulate(grads, *a, g.len());
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if need(*b) {
                    let ad = val(*a).data();
                    let gb = accumulate(grads, *b, g.len());
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, s) => add_scaled(accumulate(grads, *a, g.len()), g, *s),
            Op::MulConst(a, f) => {
                let ga = accumulate(grads, *a, g.len());
                for ((o, gv), fv) in ga.iter_mut().zip(g).zip(f) {
                    *o += gv * fv;
                }
            }
            Op::AddRow(x, b) => {
                let n = val(*b).len();
                if need(*x) {
                    add_scaled(accumulate(grads, *x, g.len()), g, 1.0);
                }
                if need(*b) {
                    let gb = accumulate(grads, *b, n);
                    for row in g.chunks(n) {
                        for (o, gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddCol(x, b) => {
                let m = val(*b).len();
                if need(*x) {
                    add_scaled(accumulate(grads, *x, g.len()), g, 1.0);
                }
                if need(*b) {
                    let n = g.len() / m;
                    let gb = accumulate(grads, *b, m);
                    for (o, row) in gb.iter_mut().zip(g.chunks(n)) {
                        *o += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let (c_in, len) = (val(*x).shape()[0], val(*x).shape()[1]);
                let ws = val(*w).shape();
                let (c_out, k) = (ws[0], ws[2]);
                let l_out = g.len() / c_out;
                let (s, p) = (*stride, *padding);
                let pos_of = |t: usize, j: usize| -> Option<usize> {
                    let pos = (t * s + j) as isize - p as isize;
                    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
                };
                if need(*x) {
                    let wd = val(*w).data();
                    let gx = accumulate(grads, *x, c_in * len);
                    for o in 0..c_out {
                        let g_row = &g[o * l_out..(o + 1) * l_out];
                        for c in 0..c_in {
                            for j in 0..k {
                                let wv = wd[(o * c_in + c) * k + j];
                                if wv == 0.0 {
                                    continue;
                                }
                                for (t, gv) in g_row.iter().enumerate() {
                                    if let Some(pos) = pos_of(t, j) {
                                        gx[c * len + pos] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if need(*w) {
                    let xd = val(*x).data();
                    let gw = accumulate(grads, *w, c_out * c_in * k);
                    for o in 0..c_out {
                        let g_row = &g[o * l_out..(o + 1) * l_out];
                        for c in 0..c_in {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for (t, gv) in g_row.iter().enumerate() {
                                    if let Some(pos) = pos_of(t, j) {
                                        acc += gv * xd[c * len + pos];
                                    }
                                }
                                gw[(o * c_in + c) * k + j] += acc;
                            }
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xd = val(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((o, gv), &x) in ga.iter_mut().zip(g).zip(xd) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = math::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *o += gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                }
            }
            Op::Relu(a) => {
                let xd = val(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((o, gv), &x) in ga.iter_mut().zip(g).zip(xd) {
                    if x > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let ga = accumulate(grads, *a, g.len());
                for ((o_row, g_row), y_row) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in o_row.iter_mut().zip(g_row).zip(y_row) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = val(*gamma).len();
                let gam = val(*gamma).data();
                if need(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for (r, ((o_row, g_row), h_row)) in
                        gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let mut sum_g = 0.0;
                        let mut sum_gh = 0.0;
                        for j in 0..n {
                            let gh = g_row[j] * gam[j];
                            sum_g += gh;
                            sum_gh += gh * h_row[j];
                        }
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            let gh = g_row[j] * gam[j];
                            o_row[j] += scale * (n as f64 * gh - sum_g - h_row[j] * sum_gh);
                        }
                    }
                }
                if need(*gamma) {
                    let gg = accumulate(grads, *gamma, n);
                    for (g_row, h_row) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += g_row[j] * h_row[j];
                        }
                    }
                }
                if need(*beta) {
                    let gb = accumulate(grads, *beta, n);
                    for g_row in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += g_row[j];
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let len = val(*x).len();
                let gx = accumulate(grads, *x, len);
                for (&i, gv) in index.iter().zip(g) {
                    gx[i] += gv;
                }
            }
            Op::Reshape(x) => add_scaled(accumulate(grads, *x, g.len()), g, 1.0),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let total_cols = node.value.shape()[1];
                for &p in parts {
                    let (pm, pn) = (val(p).shape()[0], val(p).shape()[1]);
                    if need(p) {
                        let gp = accumulate(grads, p, pm * pn);
                        if *axis == 0 {
                            add_scaled(gp, &g[offset * pn..(offset + pm) * pn], 1.0);
                        } else {
                            for i in 0..pm {
                                let src = &g[i * total_cols + offset..i * total_cols + offset + pn];
                                add_scaled(&mut gp[i * pn..(i + 1) * pn], src, 1.0);
                            }
                        }
                    }
                    offset += if *axis == 0 { pm } else { pn };
                }
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                let ga = accumulate(grads, *a, len);
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
            Op::RowNorms(a) => {
                let t = val(*a);
                let n = t.cols();
                let norms = node.value.data();
                let ga = accumulate(grads, *a, t.len());
                for (r, (o_row, x_row)) in ga.chunks_mut(n).zip(t.data().chunks(n)).enumerate() {
                    if norms[r] > 0.0 {
                        let s = g[r] / norms[r];
                        for (o, x) in o_row.iter_mut().zip(x_row) {
                            *o += s * x;
                        }
                    }
                }
            }
            Op::Ln(a) => {
                let xd = val(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(xd) {
                    *o += gv / x;
                }
            }
            Op::ClampMin(a, lo) => {
                let xd = val(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(xd) {
                    if x > lo {
                        *o += gv;
                    }
                }
            }
        }
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}
