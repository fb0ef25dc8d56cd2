//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena. Every primitive evaluates eagerly,
//! pushes a node that references its parents by index, and returns a
//! [`Var`] handle. Because parents always exist before their children, the
//! node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! The tape is rebuilt for every forward pass. Leaves created with
//! `requires_grad = false` never receive a gradient.
//!
//! [`Tape::ste_mask_apply`] is the straight-through masking node used for
//! score learning: the forward output is `W ⊙ M`, and the backward pass sends
//! `upstream ⊙ W` to the score tensor whether or not the mask entry is set.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Tolerance on probability-vector row sums accepted by [`Tape::kl_divergence`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    /// `[n, m] + [m]` broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kl(Var, Var),
    Sum(Var),
    Transpose(Var),
    Slice {
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaskApply {
        weight: Var,
        mask: Vec<f64>,
        scores: Option<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic sigmoid.
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn check_probability_rows(op: &'static str, t: &Tensor) -> Result<()> {
    for r in 0..t.numel() / t.cols() {
        let row = &t.data()[r * t.cols()..(r + 1) * t.cols()];
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain {
                op,
                msg: format!("row {r} has a negative or non-finite entry"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Domain {
                op,
                msg: format!("row {r} sums to {s}, not 1"),
            });
        }
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, &[s]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Elementwise sum. `b` may also be a `[m]` or `[1, m]` row that is
    /// broadcast over the rows of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.any_grad(&[a, b]);
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::new(sa, data)?;
            return Ok(self.push(value, rg, Op::Add(a, b)));
        }
        let m = *sa.last().unwrap_or(&0);
        let row_like = sb == [m] || sb == [1, m];
        if sa.len() == 2 && row_like {
            let bias = self.value(b).data().to_vec();
            let mut data = self.value(a).data().to_vec();
            for row in data.chunks_mut(m) {
                for (x, y) in row.iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            let value = Tensor::new(sa, data)?;
            return Ok(self.push(value, rg, Op::AddRow(a, b)));
        }
        Err(Error::shape("add", &[&sa, &sb]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("multiply", &[self.shape(a), self.shape(b)]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::Domain {
                op: "softmax",
                msg: "non-finite input".into(),
            });
        }
        let m = x.cols();
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks(m).zip(out.chunks_mut(m)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Softmax(a)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[m]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let m = self.value(x).cols();
        if self.shape(gamma) != [m] || self.shape(beta) != [m] {
            return Err(Error::shape(
                "layer_norm",
                &[self.shape(x), self.shape(gamma), self.shape(beta)],
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / m;
        let mut normed = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let nv = (row[c] - mean) * rs;
                normed[r * m + c] = nv;
                out[r * m + c] = nv * g[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
        ))
    }

    /// Selects rows of a 2-D `table`; the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("embedding_lookup", table)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding_lookup: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Domain {
                op: "embedding_lookup",
                msg: format!("id {bad} out of range for table with {rows} rows"),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(value, rg, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean cross-entropy of `[n, C]` logits against `n` class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                &[self.shape(logits), &[labels.len()]],
            ));
        }
        let x = self.value(logits);
        if !x.is_finite() {
            return Err(Error::Domain {
                op: "cross_entropy",
                msg: "non-finite logits".into(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            softmax_row(x.row(r), &mut probs[r * c..(r + 1) * c]);
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `KL(p ‖ q)`; each row of `p` and `q` must be a
    /// probability vector.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(Error::shape(
                "kl_divergence",
                &[self.shape(p), self.shape(q)],
            ));
        }
        check_probability_rows("kl_divergence", self.value(p))?;
        check_probability_rows("kl_divergence", self.value(q))?;
        let c = self.value(p).cols();
        let rows = self.value(p).numel() / c;
        let mut total = 0.0;
        for (&pi, &qi) in self.value(p).data().iter().zip(self.value(q).data()) {
            if pi > 0.0 {
                if qi <= 0.0 {
                    return Err(Error::Domain {
                        op: "kl_divergence",
                        msg: "q is zero where p is positive".into(),
                    });
                }
                total += pi * (pi / qi).ln();
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(value, rg, Op::Kl(p, q)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Transpose(a)))
    }

    /// Copies the `rows × cols` block of a 2-D tensor.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (n, m) = self.matrix_dims("slice", a)?;
        if rows.is_empty() || cols.is_empty() || rows.end > n || cols.end > m {
            return Err(Error::shape(
                "slice",
                &[self.shape(a), &[rows.start, rows.end, cols.start, cols.end]],
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            out.extend_from_slice(&src[r * m + cols.start..r * m + cols.end]);
        }
        let value = Tensor::new(vec![rows.len(), cols.len()], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Slice { src: a, rows, cols }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows: no inputs".into()))?;
        let (_, m) = self.matrix_dims("concat_rows", first)?;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (pn, pm) = self.matrix_dims("concat_rows", p)?;
            if pm != m {
                return Err(Error::shape(
                    "concat_rows",
                    &[self.shape(first), self.shape(p)],
                ));
            }
            out.extend_from_slice(self.value(p).data());
            n += pn;
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: no inputs".into()))?;
        let (n, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = self.matrix_dims("concat_cols", p)?;
            if pn != n {
                return Err(Error::shape(
                    "concat_cols",
                    &[self.shape(first), self.shape(p)],
                ));
            }
            widths.push(pm);
        }
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Straight-through masked weight `W ⊙ M` for score learning over a
    /// frozen weight. Backward sends `upstream ⊙ W` to `scores` for every
    /// entry, kept or pruned, and nothing to `weight`.
    pub fn ste_mask_apply(&mut self, weight: Var, mask: &Tensor, scores: Var) -> Result<Var> {
        if self.requires_grad(weight) {
            return Err(Error::Contract(
                "ste_mask_apply: weight must be frozen (requires_grad = false)".into(),
            ));
        }
        if !self.requires_grad(scores) {
            return Err(Error::Contract(
                "ste_mask_apply: scores must require gradients".into(),
            ));
        }
        self.mask_apply(weight, mask, Some(scores))
    }

    /// General masked weight. `weight` may be trainable, in which case it
    /// receives `upstream ⊙ M`; `scores`, when given, receive the
    /// straight-through `upstream ⊙ W`.
    pub fn mask_apply(&mut self, weight: Var, mask: &Tensor, scores: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight);
        if ws != mask.shape() || scores.is_some_and(|s| self.shape(s) != ws) {
            let mut shapes: Vec<&[usize]> = vec![ws, mask.shape()];
            if let Some(s) = scores {
                shapes.push(self.shape(s));
            }
            return Err(Error::shape("ste_mask_apply", &shapes));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Domain {
                op: "ste_mask_apply",
                msg: "mask entries must be 0 or 1".into(),
            });
        }
        let data = self
            .value(weight)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(w, m)| w * m)
            .collect();
        let value = Tensor::new(ws.to_vec(), data)?;
        let mut parents = vec![weight];
        parents.extend(scores);
        let rg = self.any_grad(&parents);
        Ok(self.push(
            value,
            rg,
            Op::MaskApply {
                weight,
                mask: mask.data().to_vec(),
                scores,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if needs(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, &mut |ga| matmul_nt_into(g, bv, ga, n, m, k));
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    acc(*b, &mut |gb| matmul_tn_into(av, g, gb, n, k, m));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let m = self.value(*b).numel();
                acc(*b, &mut |s| {
                    for row in g.chunks(m) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let m = node.value.cols();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            srow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let m = node.value.cols();
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |s| {
                    for (grow, nrow) in g.chunks(m).zip(normed.chunks(m)) {
                        for c in 0..m {
                            s[c] += grow[c] * nrow[c];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for grow in g.chunks(m) {
                        s.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |s| {
                    let mf = m as f64;
                    for (r, ((srow, grow), nrow)) in s
                        .chunks_mut(m)
                        .zip(g.chunks(m))
                        .zip(normed.chunks(m))
                        .enumerate()
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dn = 0.0;
                        for c in 0..m {
                            let d = grow[c] * gv[c];
                            sum_d += d;
                            sum_dn += d * nrow[c];
                        }
                        for c in 0..m {
                            let d = grow[c] * gv[c];
                            srow[c] += rstd[r] / mf * (mf * d - sum_d - nrow[c] * sum_dn);
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let d = self.value(*table).cols();
                acc(*table, &mut |s| {
                    for (k, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            s[i * d + c] += g[k * d + c];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let n = labels.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == lab { 1.0 } else { 0.0 };
                            s[r * c + k] += g[0] * (probs[r * c + k] - onehot) / n;
                        }
                    }
                });
            }
            Op::Kl(p, q) => {
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                let rows = (pv.len() / self.value(*p).cols()) as f64;
                acc(*p, &mut |s| {
                    for i in 0..s.len() {
                        let pi = pv[i].max(f64::MIN_POSITIVE);
                        s[i] += g[0] * ((pi / qv[i]).ln() + 1.0) / rows;
                    }
                });
                acc(*q, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[0] * pv[i] / qv[i] / rows;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Transpose(a) => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Slice { src, rows, cols } => {
                let m = self.shape(*src)[1];
                let w = cols.len();
                acc(*src, &mut |s| {
                    for (k, r) in rows.clone().enumerate() {
                        for (j, c) in cols.clone().enumerate() {
                            s[r * m + c] += g[k * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |s| {
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            let grow = &g[r * total + offset..r * total + offset + w];
                            srow.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::MaskApply {
                weight,
                mask,
                scores,
            } => {
                acc(*weight, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                });
                if let Some(sv) = scores {
                    let w = self.value(*weight).data();
                    acc(*sv, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * w[i];
                        }
                    });
                }
            }
        }
    }
}
