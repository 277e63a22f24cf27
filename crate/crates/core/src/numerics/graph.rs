//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Parameters enter the tape by borrowing from a [`ParamStore`]; calling
//! [`Graph::backward`] on a scalar produces [`Gradients`] that can be
//! accumulated back into the store.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_rows_masked, Tensor};
use crate::error::NumericError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// A value recorded on a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        scale: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Row(usize, usize),
    MeanRows(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    CrossEntropy {
        logits: usize,
        target: Tensor,
        probs: Tensor,
    },
    Sum(usize),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Tape of differentiable operations.
pub struct Graph<'p> {
    id: u64,
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    bound: HashMap<ParamId, usize>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericError> {
        let value = value.ensure_finite(name)?;
        Ok(self.push(Cow::Owned(value), op))
    }

    fn idx(&self, v: Var) -> Result<usize, NumericError> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(NumericError::Usage(
                "variable does not belong to this graph".into(),
            ));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable does not belong to this graph");
        &self.nodes[v.idx].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&idx) = self.bound.get(&id) {
            return Var {
                graph: self.id,
                idx,
            };
        }
        let v = self.push(Cow::Borrowed(self.store.value(id)), Op::Param(id));
        self.bound.insert(id, v.idx);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        self.push_checked(out, Op::Add(ia, ib), "add")
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(NumericError::Shape {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.as_ref().clone();
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push_checked(out, Op::AddRow(ia, ib), "add_row")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push_checked(out, Op::MatMul(ia, ib), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        self.push_checked(out, Op::MatMulT(ia, ib), "matmul_t")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * s);
        self.push_checked(out, Op::Scale(ia, s), "scale")
    }

    /// Row-wise softmax. Columns with `keep[j] == false` get weight exactly 0.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var, NumericError> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if let Some(k) = keep {
            if k.len() != x.cols() {
                return Err(NumericError::Shape {
                    op: "softmax_rows",
                    left: x.shape().to_vec(),
                    right: vec![k.len()],
                });
            }
            if !k.iter().any(|&b| b) {
                return Err(NumericError::Usage("softmax with every column masked".into()));
            }
        }
        let out = softmax_rows_masked(x, keep);
        self.push_checked(out, Op::Softmax(ia), "softmax_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v.max(0.0));
        self.push_checked(out, Op::Relu(ia), "relu")
    }

    /// Per-row normalisation with learnable `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericError> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[ix].value;
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let n = xv.cols();
        if g.len() != n || b.len() != n {
            return Err(NumericError::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let o = out.row_mut(i);
            for j in 0..n {
                o[j] = g.data()[j] * xhat.row(i)[j] + b.data()[j];
            }
        }
        self.push_checked(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` during
    /// training; evaluation (or `rate == 0`) returns `x` unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var, NumericError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericError::Usage(format!("dropout rate {rate} outside [0,1)")));
        }
        let ix = self.idx(x)?;
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = &self.nodes[ix].value;
        let scale: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = xv.as_ref().clone();
        for (o, s) in out.data_mut().iter_mut().zip(&scale) {
            *o *= s;
        }
        self.push_checked(out, Op::Dropout { x: ix, scale }, "dropout")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let rows = self.nodes[idxs[0]].value.rows();
        let mut total = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(NumericError::Shape {
                    op: "concat_cols",
                    left: self.nodes[idxs[0]].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut out = Tensor::zeros(&[rows, total]);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idxs {
                let src = self.nodes[i].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push_checked(out, Op::ConcatCols(idxs), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let cols = self.nodes[idxs[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(NumericError::Shape {
                    op: "concat_rows",
                    left: self.nodes[idxs[0]].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push_checked(out, Op::ConcatRows(idxs), "concat_rows")
    }

    /// Selects row `i` as a `1×n` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, NumericError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if i >= xv.rows() {
            return Err(NumericError::Usage(format!("row {i} of {} rows", xv.rows())));
        }
        let out = Tensor::new(vec![1, xv.cols()], xv.row(i).to_vec())?;
        self.push_checked(out, Op::Row(ix, i), "row")
    }

    /// Mean of the listed rows as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(NumericError::Usage("mean_rows: bad row selection".into()));
        }
        let n = xv.cols();
        let mut out = vec![0.0; n];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        let out = Tensor::new(vec![1, n], out)?;
        self.push_checked(out, Op::MeanRows(ix, rows.to_vec()), "mean_rows")
    }

    /// Embedding lookup: row `ids[t]` of `table` becomes output row `t`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let it = self.idx(table)?;
        let tv = &self.nodes[it].value;
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(NumericError::Usage(format!(
                "id {bad} out of range for table with {} rows",
                tv.rows()
            )));
        }
        let n = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        self.push_checked(out, Op::GatherRows(it, ids.to_vec()), "gather_rows")
    }

    /// `-Σ y·log softmax(logits)` averaged over rows; returns a `1×1` scalar.
    pub fn cross_entropy(&mut self, logits: Var, one_hot: &Tensor) -> Result<Var, NumericError> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        lv.same_shape(one_hot, "cross_entropy")?;
        let probs = softmax_rows_masked(lv, None);
        let mut total = 0.0;
        for i in 0..lv.rows() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, &y) in one_hot.row(i).iter().enumerate() {
                if y != 0.0 {
                    total -= y * (row[j] - lse);
                }
            }
        }
        let out = Tensor::scalar(total / lv.rows() as f64);
        self.push_checked(
            out,
            Op::CrossEntropy {
                logits: il,
                target: one_hot.clone(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let ix = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        self.push_checked(out, Op::Sum(ix), "sum")
    }

    /// Back-propagates from a `1×1` scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(NumericError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));
        let mut params = Vec::new();

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |j: usize| -> &Tensor { &self.nodes[j].value };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => params.push((*id, g.clone())),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
                Op::MatMul(a, b) => {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    accumulate(&mut grads, *a, g.matmul_t(val(*b))?);
                    accumulate(&mut grads, *b, val(*a).t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    accumulate(&mut grads, *a, g.matmul(val(*b))?);
                    accumulate(&mut grads, *b, g.t_matmul(val(*a))?);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = val(*gamma).data();
                    let n = xhat.cols();
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dx = Tensor::zeros(xhat.shape());
                    for r in 0..xhat.rows() {
                        let (xh, gr) = (xhat.row(r), g.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let d = gr[j] * gm[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let k = inv_std[r] / n as f64;
                        let out = dx.row_mut(r);
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            out[j] = k * (n as f64 * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
                }
                Op::Dropout { x, scale } => {
                    let mut dx = g.clone();
                    for (d, s) in dx.data_mut().iter_mut().zip(scale) {
                        *d *= s;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut dp = Tensor::zeros(val(p).shape());
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        let dp = Tensor::new(val(p).shape().to_vec(), g.data()[off..off + len].to_vec())?;
                        off += len;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::Row(x, r) => {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    dx.row_mut(*r).copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows(x, rows) => {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    let k = rows.len() as f64;
                    for &r in rows {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                            *d += v / k;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows(t, ids) => {
                    let mut dt = Tensor::zeros(val(*t).shape());
                    for (row, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(row)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *t, dt);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let s = g.data()[0] / probs.rows() as f64;
                    let mut dl = probs.clone();
                    for r in 0..dl.rows() {
                        let ysum: f64 = target.row(r).iter().sum();
                        for (d, y) in dl.row_mut(r).iter_mut().zip(target.row(r)) {
                            *d = s * (*d * ysum - y);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, Tensor::full(val(*x).shape(), g.data()[0]));
                }
            }
            grads[i] = Some(g);
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            graph: self.id,
            nodes: grads,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded variable. Variables
    /// the loss does not depend on get a zero gradient of matching shape.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Result<Tensor, NumericError> {
        if v.graph != self.graph || graph.id != self.graph {
            return Err(NumericError::Usage(
                "gradient requested for a variable outside the recorded computation".into(),
            ));
        }
        let idx = graph.idx(v)?;
        Ok(match self.nodes.get(idx).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(v).shape()),
        })
    }

    /// Gradient for a parameter, if the loss reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Adds the parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences over every coordinate of every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph<'_>) -> Var,
    {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss).unwrap().params
        };
        let eps = 1e-5;
        for (id, grad) in analytic {
            for k in 0..grad.len() {
                let orig = store.value(id).data()[k];
                store.get_mut(id).value.data_mut()[k] = orig + eps;
                let up = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).data()[0]
                };
                store.get_mut(id).value.data_mut()[k] = orig - eps;
                let down = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).data()[0]
                };
                store.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = grad.data()[k];
                let denom = a.abs().max(numeric.abs());
                let err = if denom < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
                assert!(err < 1e-4, "{} [{k}]: analytic {a} numeric {numeric}", store.get(id).name);
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let loss = g.sum(wv).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap(), &Tensor::full(&[2, 2], 1.0));
    }

    #[test]
    fn cross_entropy_closed_form() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let loss = g.cross_entropy(logits, &y).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        // softmax([0,0]) - [1,0]
        assert_eq!(grads.wrt(&g, logits).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn relu_and_dropout_basics() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![-1.0, 2.0]]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = g.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(d, x);
        let e = g.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(e, x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[50, 40], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = g.dropout(x, 0.25, &mut rng, true).unwrap();
        let v = g.value(d);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-15));
        let dropped = v.data().iter().filter(|&&e| e == 0.0).count() as f64 / 2000.0;
        assert!((dropped - 0.25).abs() < 0.03);
    }

    #[test]
    fn foreign_variable_is_a_usage_error() {
        let store = ParamStore::new();
        let mut g1 = Graph::new(&store);
        let mut g2 = Graph::new(&store);
        let a = g1.constant(Tensor::scalar(1.0));
        let b = g2.constant(Tensor::scalar(2.0));
        assert!(matches!(g1.backward(b), Err(NumericError::Usage(_))));
        let grads = g1.backward(a).unwrap();
        assert!(matches!(grads.wrt(&g2, b), Err(NumericError::Usage(_))));
        let non_scalar = g1.constant(Tensor::zeros(&[2, 2]));
        assert!(g1.backward(non_scalar).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[1, 2], 1e300));
        assert!(matches!(g.scale(x, 1e300), Err(NumericError::NonFinite { .. })));
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let a = store.insert("a", rand_tensor(&[3, 4], &mut rng));
        let b = store.insert("b", rand_tensor(&[4, 5], &mut rng));
        let c = store.insert("c", rand_tensor(&[2, 5], &mut rng));
        let bias = store.insert("bias", rand_tensor(&[1, 5], &mut rng));
        let gamma = store.insert("gamma", rand_tensor(&[1, 5], &mut rng));
        let beta = store.insert("beta", rand_tensor(&[1, 5], &mut rng));
        let table = store.insert("table", rand_tensor(&[6, 4], &mut rng));
        let target = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 1.0]]);
        check(&mut store, |g| {
            let av = g.param(a);
            let emb = g.param(table);
            let looked = g.gather_rows(emb, &[1, 4, 1]).unwrap();
            let x = g.add(av, looked).unwrap();
            let bv = g.param(b);
            let h = g.matmul(x, bv).unwrap();
            let biasv = g.param(bias);
            let h = g.add_row(h, biasv).unwrap();
            let h = g.relu(h).unwrap();
            let gm = g.param(gamma);
            let bt = g.param(beta);
            let h = g.layer_norm(h, gm, bt).unwrap();
            let cv = g.param(c);
            let scores = g.matmul_t(cv, h).unwrap();
            let scores = g.scale(scores, 0.7).unwrap();
            let attn = g.softmax_rows(scores, Some(&[true, false, true])).unwrap();
            let mixed = g.matmul(attn, h).unwrap();
            let r0 = g.row(mixed, 0).unwrap();
            let m = g.mean_rows(h, &[0, 2]).unwrap();
            let both = g.concat_rows(&[r0, m]).unwrap();
            let wide = g.concat_cols(&[both, both]).unwrap();
            let s = g.sum(wide).unwrap();
            let ce = g.cross_entropy(both, &target).unwrap();
            let s = g.scale(s, 0.1).unwrap();
            g.add(ce, s).unwrap()
        });
    }
}
