//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order, so `backward` replays them in reverse
//! creation order. The tape is single-threaded and meant to be rebuilt for
//! each optimisation step.

use crate::error::{Error, Result};
use crate::numerics::tensor::{softmax_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
    SqNormRowsMean(Var),
    L1RowsMean(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { input: Var, cols: usize },
    // forward copy whose backward rule is empty
    StopGrad,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive operations with their backward rules.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::arg(format!(
            "expected a vector or matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.rows(), t.cols()))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// was reachable and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// `x · wᵀ + b` with `x: [B×in]`, `w: [out×in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, inner) = matrix_dims(tx)?;
        if tw.shape().len() != 2 || tw.cols() != inner {
            return Err(Error::dim("linear", tx.shape(), tw.shape()));
        }
        let out_dim = tw.rows();
        let mut out = vec![0.0; rows * out_dim];
        gemm_nt(tx.data(), tw.data(), &mut out, rows, inner, out_dim);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != out_dim {
                return Err(Error::dim("linear bias", tw.shape(), tb.shape()));
            }
            for r in 0..rows {
                for (o, &bv) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![rows, out_dim], out)?,
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// Adds `bias: [n]` to every row of `a: [B×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (rows, cols) = matrix_dims(ta)?;
        if tb.len() != cols {
            return Err(Error::dim("add_bias", ta.shape(), tb.shape()));
        }
        let mut out = ta.data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, bias), rg))
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
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
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

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Row-wise softmax; a vector is treated as one row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = matrix_dims(ta)?;
        if cols == 0 {
            return Err(Error::arg("softmax of an empty vector"));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(ta.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(a), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = matrix_dims(tl)?;
        if labels.len() != rows {
            return Err(Error::dim("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::arg("cross_entropy on an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row(r);
            let p = &mut probs[r * cols..(r + 1) * cols];
            softmax_into(row, p);
            // log-sum-exp form keeps the confident-correct limit exact
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mse", ta.shape(), tb.shape()));
        }
        if ta.is_empty() {
            return Err(Error::arg("mse of empty tensors"));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = s / ta.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// `(1/B) Σᵢ ‖aᵢ‖²₂` over the rows of `a`.
    pub fn sq_norm_rows_mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, _) = matrix_dims(ta)?;
        if rows == 0 {
            return Err(Error::arg("sq_norm_rows_mean of an empty batch"));
        }
        let v = ta.data().iter().map(|x| x * x).sum::<f64>() / rows as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::SqNormRowsMean(a), rg))
    }

    /// `(1/B) Σᵢ ‖aᵢ‖₁` over the rows of `a`.
    pub fn l1_rows_mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, _) = matrix_dims(ta)?;
        if rows == 0 {
            return Err(Error::arg("l1_rows_mean of an empty batch"));
        }
        let v = ta.data().iter().map(|x| x.abs()).sum::<f64>() / rows as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::L1RowsMean(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::arg("mean of an empty tensor"));
        }
        let v = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Mean(a), rg))
    }

    /// First `cols` columns of a matrix.
    pub fn slice_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, total) = matrix_dims(ta)?;
        if cols > total {
            return Err(Error::dim("slice_cols", ta.shape(), &[cols]));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend_from_slice(&ta.row(r)[..cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::SliceCols { input: a, cols },
            rg,
        ))
    }

    /// Same forward value as `a`; contributes nothing to the gradients of
    /// `a`'s ancestors.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Computes gradients of the scalar `loss` with respect to every
    /// reachable node that requires a gradient. Gradients from a previous
    /// call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // only nodes that require a gradient expose one
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, tb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), g, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (rows, inner, out_dim) = (tx.rows(), tx.cols(), tw.rows());
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * inner];
                    gemm_nn(g, tw.data(), &mut dx, rows, out_dim, inner);
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_dim * inner];
                    gemm_tn(g, tx.data(), &mut dw, rows, out_dim, inner);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, col_sums(g, rows, out_dim));
                    }
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*bias) {
                    let cols = out.cols();
                    self.accumulate(grads, *bias, col_sums(g, out.rows(), cols));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g
                    .iter()
                    .zip(ta.data())
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(x, &y)| x * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(x, &y)| x * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * cols + l] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] / ta.len() as f64;
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.iter().map(|x| -x).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::SqNormRowsMean(a) => {
                let ta = self.value(*a);
                let k = 2.0 * g[0] / ta.rows() as f64;
                self.accumulate(grads, *a, ta.data().iter().map(|x| k * x).collect());
            }
            Op::L1RowsMean(a) => {
                let ta = self.value(*a);
                let k = g[0] / ta.rows() as f64;
                let d = ta
                    .data()
                    .iter()
                    .map(|&x| {
                        if x > 0.0 {
                            k
                        } else if x < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SliceCols { input, cols } => {
                let ti = self.value(*input);
                let (rows, total) = (ti.rows(), ti.cols());
                let mut d = vec![0.0; rows * total];
                for r in 0..rows {
                    d[r * total..r * total + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                self.accumulate(grads, *input, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

// out[m×n] = a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] = a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

// out[k×n] = a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
