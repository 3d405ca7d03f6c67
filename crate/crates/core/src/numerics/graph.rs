//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Parameter
//! leaves are read through the borrowed [`ParamStore`] instead of being copied.
//! [`Graph::backward`] replays the tape in reverse and returns [`Gradients`]
//! keyed by parameter.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RowsDot(Var, Var),
    Gather(Var, Vec<Option<usize>>),
    GatherRows(Var, Vec<usize>),
    SpanLogSum(Var),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Scales the gradient accumulated into one parameter. Used by fault-injection
/// fixtures to check that a gradient checker localises a broken rule.
#[derive(Clone, Copy, Debug)]
pub struct LeafFault {
    pub param: ParamId,
    pub scale: f64,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    fault: Option<LeafFault>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise masked softmax with max subtraction. `keep[i] == false` positions
/// come out as exactly zero.
pub(crate) fn softmax_rows_raw(
    data: &[f64],
    rows: usize,
    cols: usize,
    keep: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let kept = |j: usize| keep.map_or(true, |k| k[r * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if kept(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if kept(j) {
                let e = (v - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: LeafFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A constant that receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), Tensor::scalar(0.0))
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let out = Tensor::new(vec![m, n], matmul_nt_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(Op::MatMulNT(a, b), out))
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2();
        if tx.rank() != 2 || tb.numel() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (o, &b) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(x, bias), out))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let tx = self.value(x);
        if matches!(kind, Unary::Log | Unary::Sqrt) {
            if let Some(&bad) = tx.data().iter().find(|&&v| !(v > 0.0)) {
                let op = if kind == Unary::Log { "log" } else { "sqrt" };
                return Err(Error::Domain { op, value: bad });
            }
        }
        let out = match kind {
            Unary::Exp => tx.map(f64::exp),
            Unary::Log => tx.map(f64::ln),
            Unary::Sqrt => tx.map(f64::sqrt),
            Unary::Gelu => tx.map(gelu),
        };
        Ok(self.push(Op::Unary(x, kind), out))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(x, lo, hi), out)
    }

    /// Softmax over each row. `keep` marks the positions that take part;
    /// the others come out as exactly zero.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if let Some(k) = keep {
            if k.len() != tx.numel() {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let data = softmax_rows_raw(tx.data(), m, n, keep)?;
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax(x), out))
    }

    /// Normalises each row to zero mean and unit variance, then applies `gain`
    /// and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = tx.dims2();
        if d == 0 || tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// Stacks matrices that share their column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty { what: "concat_rows" })?;
        let d = self.value(first).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != d {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    /// Joins matrices side by side; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty { what: "concat_cols" })?;
        let m = self.value(first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != m {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p).data();
            for r in 0..m {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start > end || end > t.shape()[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let d = t.shape()[1];
        let out = Tensor::new(vec![end - start, d], t.data()[start * d..end * d].to_vec())?;
        Ok(self.push(Op::SliceRows(x, start), out))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start > end || end > t.shape()[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        Ok(self.push(Op::SliceCols(x, start), out))
    }

    /// Dot product of matching rows: `out[i] = a[i] · b[i]`.
    pub fn rows_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape() != tb.shape() {
            return Err(shape_err("rows_dot", ta, tb));
        }
        let (m, d) = ta.dims2();
        let data = (0..m)
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect::<Vec<f64>>();
        let _ = d;
        Ok(self.push(Op::RowsDot(a, b), Tensor::vector(data)))
    }

    /// Picks flat elements of `x` into a tensor of `shape`; `None` slots are 0.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        let mut data = Vec::with_capacity(index.len());
        for i in &index {
            match *i {
                Some(i) if i >= t.numel() => {
                    return Err(Error::Index {
                        what: "gather",
                        index: i,
                        len: t.numel(),
                    })
                }
                Some(i) => data.push(t.data()[i]),
                None => data.push(0.0),
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::Gather(x, index), out))
    }

    /// Table lookup: row `i` of the output is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", t, t));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), out))
    }

    /// For a vector `v` of length `m`, the `(m+1)×(m+1)` matrix with entry
    /// `(i, j)` equal to `Σ_{k=min(i,j)}^{max(i,j)-1} v[k]`, built from one
    /// prefix-sum pass. The diagonal is exactly zero and the result exactly
    /// symmetric.
    pub fn span_sums(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.rank() > 1 {
            return Err(shape_err("span_sums", t, t));
        }
        let m = t.numel();
        let n = m + 1;
        let mut prefix = vec![0.0; n];
        for k in 0..m {
            prefix[k + 1] = prefix[k] + t.data()[k];
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let s = prefix[j] - prefix[i];
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        let out = Tensor::new(vec![n, n], data)?;
        Ok(self.push(Op::SpanLogSum(v), out))
    }

    /// Column means of a matrix as a `1×d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, d) = t.dims2();
        if t.rank() != 2 || m == 0 {
            return Err(Error::Empty { what: "mean_rows" });
        }
        let mut data = vec![0.0; d];
        for r in 0..m {
            for (o, &v) in data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= m as f64;
        }
        let out = Tensor::new(vec![1, d], data)?;
        Ok(self.push(Op::MeanRows(x), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        let k = t.numel();
        if target >= k {
            return Err(Error::Index {
                what: "cross_entropy",
                index: target,
                len: k,
            });
        }
        let probs = softmax_rows_raw(t.data(), 1, k, None)?;
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Replays the tape from `loss` and returns the gradient of every
    /// parameter that took part in the forward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let shape = self.store.value(*id).shape();
                    match self.fault {
                        Some(f) if f.param == *id => {
                            let scaled: Vec<f64> = g.iter().map(|v| v * f.scale).collect();
                            out.add(*id, &scaled, shape);
                        }
                        _ => out.add(*id, &g, shape),
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let ga = matmul_nt_raw(&g, tb.data(), m, n, k);
                    let gb = matmul_tn_raw(ta.data(), &g, m, k, n);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    let ga = matmul_raw(&g, tb.data(), m, n, k);
                    let gb = matmul_tn_raw(&g, ta.data(), m, n, k);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Affine(x, s) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::AddRow(x, bias) => {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::Unary(x, kind) => {
                    let tx = self.value(*x).data();
                    let y = node.value.data();
                    let gx: Vec<f64> = match kind {
                        Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.iter().zip(tx).map(|(g, x)| g / x).collect(),
                        Unary::Sqrt => g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect(),
                        Unary::Gelu => g.iter().zip(tx).map(|(g, &x)| g * gelu_grad(x)).collect(),
                    };
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let tx = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(tx)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let (m, n) = node.value.dims2();
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gain).data();
                    let (m, d) = node.value.dims2();
                    let mut gx = vec![0.0; m * d];
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..m {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            gx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gain, &gg);
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        accumulate(&mut grads, p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = node.value.dims2();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).dims2().1;
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, &gp);
                        offset += w;
                    }
                }
                Op::SliceRows(x, start) => {
                    let tx = self.value(*x);
                    let d = tx.shape()[1];
                    let mut gx = vec![0.0; tx.numel()];
                    gx[start * d..start * d + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SliceCols(x, start) => {
                    let tx = self.value(*x);
                    let (m, n) = (tx.shape()[0], tx.shape()[1]);
                    let w = node.value.shape()[1];
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::RowsDot(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, d) = ta.dims2();
                    let mut ga = vec![0.0; m * d];
                    let mut gb = vec![0.0; m * d];
                    for r in 0..m {
                        for j in 0..d {
                            ga[r * d + j] = g[r] * tb.data()[r * d + j];
                            gb[r * d + j] = g[r] * ta.data()[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Gather(x, index) => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (gi, i) in g.iter().zip(index) {
                        if let Some(i) = i {
                            gx[*i] += gi;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::GatherRows(table, ids) => {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let mut gt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, &gt);
                }
                Op::SpanLogSum(v) => {
                    let m = self.value(*v).numel();
                    let n = m + 1;
                    // Entry (i, j), i < j, covers v[i..j]; a difference array
                    // spreads each symmetric pair over its span in O(n²).
                    let mut diff = vec![0.0; n + 1];
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let gs = g[i * n + j] + g[j * n + i];
                            diff[i] += gs;
                            diff[j] -= gs;
                        }
                    }
                    let mut gv = vec![0.0; m];
                    let mut run = 0.0;
                    for k in 0..m {
                        run += diff[k];
                        gv[k] = run;
                    }
                    accumulate(&mut grads, *v, &gv);
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let (m, d) = tx.dims2();
                    let mut gx = vec![0.0; m * d];
                    for r in 0..m {
                        for j in 0..d {
                            gx[r * d + j] = g[j] / m as f64;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.value(*x).numel()];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, &g),
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    gl[*target] -= g[0];
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits).data();
                    let m = targets.len() as f64;
                    let gl: Vec<f64> = z
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / m)
                        .collect();
                    accumulate(&mut grads, *logits, &gl);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
