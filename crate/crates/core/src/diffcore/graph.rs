//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so reverse creation order is a valid topological order for the
//! backward sweep. Graphs are cheap and meant to be rebuilt per step.

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows { x: Var, count: usize },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    MaskedSoftmax { x: Var, valid: usize },
    LayerNorm { x: Var, eps: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_dims(a: &Tensor, b: &Tensor, op: &str) -> Result<(usize, usize)> {
    let (da, db) = (a.dims2(), b.dims2());
    if da != db {
        return Err(Error::shape(format!("{op}: {da:?} vs {db:?}")));
    }
    Ok(da)
}

fn col_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (r, c) = same_dims(self.value(a), self.value(b), name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::from_parts(r, c, data), self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip_op(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).dims2() != (1, n) {
            return Err(Error::shape(format!(
                "{name}: [{m},{n}] with row {:?}",
                self.value(row).dims2()
            )));
        }
        let b = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        Ok((Tensor::from_parts(m, n, data), self.rg(&[a, row])))
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, rg) = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// `a[m,n] * row[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, rg) = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Per-row sum: `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let data = self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(m, 1, data), Op::SumCols(a), rg)
    }

    /// Mean of the first `count` rows: `[m,n] -> [1,n]`. Rows past `count` do not contribute.
    pub fn mean_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if count == 0 || count > m {
            return Err(Error::shape(format!("mean_rows: count {count} over {m} rows")));
        }
        let sums = col_sums(&self.value(a).data()[..count * n], count, n);
        let data = sums.into_iter().map(|s| s / count as f64).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(1, n, data), Op::MeanRows { x: a, count }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(n, m, data), Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: no inputs"));
        }
        let m = self.value(parts[0]).dims2().0;
        if parts.iter().any(|&p| self.value(p).dims2().0 != m) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).dims2().1).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(m, total, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows: no inputs"));
        }
        let n = self.value(parts[0]).dims2().1;
        if parts.iter().any(|&p| self.value(p).dims2().1 != n) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start >= end || end > n {
            return Err(Error::shape(format!("slice_cols: {start}..{end} of {n}")));
        }
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r[start..end].to_vec())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(m, end - start, data), Op::SliceCols { x: a, start }, rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start >= end || end > m {
            return Err(Error::shape(format!("slice_rows: {start}..{end} of {m}")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(end - start, n, data), Op::SliceRows { x: a, start }, rg))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::shape("gather: no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(format!("gather: id {id} out of {v} rows")));
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(ids.len(), n, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax over the first `valid` columns; the remaining columns are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, valid: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if valid == 0 || valid > n {
            return Err(Error::shape(format!("masked_softmax: valid {valid} of {n}")));
        }
        let mut data = vec![0.0; m * n];
        for (r, row) in self.value(a).data().chunks(n).enumerate() {
            let max = row[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..r * n + valid];
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(&row[..valid]) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::MaskedSoftmax { x: a, valid }, rg))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks(n) {
            let (mu, inv) = row_stats(row, eps);
            data.extend(row.iter().map(|&x| (x - mu) * inv));
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(m, n, data), Op::LayerNorm { x: a, eps }, rg)
    }

    /// Mean softmax cross-entropy of `logits[B,C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2();
        if labels.len() != b {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: {b} rows, {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(format!("softmax_cross_entropy: label {bad} of {c} classes")));
        }
        let mut total = 0.0;
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != labels.len() {
            return Err(Error::shape(format!(
                "bce_with_logits: {} logits, {} labels",
                t.numel(),
                labels.len()
            )));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_term(z, y))
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / labels.len() as f64),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Detach, false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        // Contributions are produced in matrix form; keep the node's own shape.
        let contrib = if contrib.shape() == self.nodes[v.0].value.shape() {
            contrib
        } else {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), contrib.into_data())
                .expect("gradient numel matches node")
        };
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let (m, n) = out.dims2();
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.dims2().1;
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(m, k, da));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_parts(k, n, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, da));
                self.accumulate(grads, *b, Tensor::from_parts(m, n, db));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, da));
                self.accumulate(grads, *b, Tensor::from_parts(m, n, db));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, Tensor::from_parts(1, n, col_sums(gd, m, n)));
                }
            }
            Op::MulRow(a, row) => {
                let b = self.value(*row).data();
                if self.requires_grad(*a) {
                    let da = gd
                        .chunks(n)
                        .flat_map(|r| r.iter().zip(b).map(|(g, y)| g * y).collect::<Vec<_>>())
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(m, n, da));
                }
                if self.requires_grad(*row) {
                    let prod: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *row, Tensor::from_parts(1, n, col_sums(&prod, m, n)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Sqrt(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g / (2.0 * y)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Square(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(m, n, d));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let shape = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0] / t.numel() as f64));
            }
            Op::SumCols(a) => {
                let (am, an) = self.value(*a).dims2();
                let d = (0..am).flat_map(|r| std::iter::repeat_n(gd[r], an)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(am, an, d));
            }
            Op::MeanRows { x, count } => {
                let (am, an) = self.value(*x).dims2();
                let mut d = vec![0.0; am * an];
                for r in 0..*count {
                    for c in 0..an {
                        d[r * an + c] = gd[c] / *count as f64;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(am, an, d));
            }
            Op::Transpose(a) => {
                let d = transpose_raw(gd, m, n);
                self.accumulate(grads, *a, Tensor::from_parts(n, m, d));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.requires_grad(p) {
                        let d = gd.chunks(n).flat_map(|r| r[offset..offset + w].to_vec()).collect();
                        self.accumulate(grads, p, Tensor::from_parts(m, w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).dims2().0;
                    if self.requires_grad(p) {
                        let d = gd[offset * n..(offset + h) * n].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(h, n, d));
                    }
                    offset += h;
                }
            }
            Op::SliceCols { x, start } => {
                let (am, an) = self.value(*x).dims2();
                let mut d = vec![0.0; am * an];
                for r in 0..am {
                    d[r * an + start..r * an + start + n].copy_from_slice(&gd[r * n..(r + 1) * n]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(am, an, d));
            }
            Op::SliceRows { x, start } => {
                let (am, an) = self.value(*x).dims2();
                let mut d = vec![0.0; am * an];
                d[start * an..(start + m) * an].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::from_parts(am, an, d));
            }
            Op::Gather { table, ids } => {
                let (v, w) = self.value(*table).dims2();
                let mut d = vec![0.0; v * w];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..w {
                        d[id * w + c] += gd[r * w + c];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(v, w, d));
            }
            Op::MaskedSoftmax { x, valid } => {
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let y = &out.data()[r * n..r * n + valid];
                    let gr = &gd[r * n..r * n + valid];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..*valid {
                        d[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(m, n, d));
            }
            Op::LayerNorm { x, eps } => {
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    let (_, inv) = row_stats(self.value(*x).row_slice(r), *eps);
                    let xhat = &out.data()[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gx = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    d.extend(gr.iter().zip(xhat).map(|(g, xh)| inv * (g - mean_g - xh * mean_gx)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(m, n, d));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (b, c) = self.value(*logits).dims2();
                let scale = gd[0] / b as f64;
                let mut d = Vec::with_capacity(b * c);
                for (row, &y) in self.value(*logits).data().chunks(c).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        d.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(b, c, d));
            }
            Op::BceWithLogits { logits, labels } => {
                let lt = self.value(*logits);
                let (lm, ln) = lt.dims2();
                let scale = gd[0] / labels.len() as f64;
                let d = lt
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| scale * (sigmoid(z) - y))
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_parts(lm, ln, d));
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `-[y ln s(z) + (1-y) ln(1 - s(z))]`.
pub(crate) fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
