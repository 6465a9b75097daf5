//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation computes its
//! forward value eagerly, checks it for non-finite entries, and records what
//! the backward pass needs. Because inputs always precede their consumers,
//! walking the list backwards is a valid reverse topological order, so each
//! node is visited exactly once and receives the sum of its consumers'
//! contributions before it propagates further.
//!
//! Parameters enter as borrowed leaves, so building a graph never copies
//! model weights. Nodes whose inputs all have `requires_grad == false` skip
//! backward bookkeeping entirely; frozen sub-networks cost forward compute only.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether attention may look at later positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    Causal,
    Full,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Vec<f64>),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    Reshape(usize),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Owned leaf (inputs, constants).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    /// Borrowed leaf; used for model parameters.
    pub fn param(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Add(a.0, b.0), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Mul(a.0, b.0), rg, "mul")
    }

    /// `x[.., d] + bias[d]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.len() != d {
            return Err(Error::Dimension {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0, bias.0]);
        self.push(out, Op::AddRow(x.0, bias.0), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Scale(x.0, s), rg, "scale")
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::Dimension {
                op: "mul_const",
                left: tx.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::MulConst(x.0, c.data().to_vec()), rg, "mul_const")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Gelu(x.0), rg, "gelu")
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Softmax(x.0), rg, "softmax")
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if d == 0 || tg.len() != d || tb.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        self.push(out, op, rg, "layer_norm")
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q`, `k`, `v` (each `n × d`); heads are contiguous column blocks.
    ///
    /// Under [`AttentionMask::Causal`] row `i` only ever reads rows `0..=i`,
    /// so its output is bitwise independent of later positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = tq.dims2()?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::Dimension {
                op: "attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut q_h = vec![0.0; n * dh];
        let mut k_h = vec![0.0; n * dh];
        let mut v_h = vec![0.0; n * dh];
        for h in 0..heads {
            for i in 0..n {
                let src = i * d + h * dh;
                q_h[i * dh..(i + 1) * dh].copy_from_slice(&tq.data()[src..src + dh]);
                k_h[i * dh..(i + 1) * dh].copy_from_slice(&tk.data()[src..src + dh]);
                v_h[i * dh..(i + 1) * dh].copy_from_slice(&tv.data()[src..src + dh]);
            }
            for i in 0..n {
                let visible = match mask {
                    AttentionMask::Causal => i + 1,
                    AttentionMask::Full => n,
                };
                let p_row = &mut probs[(h * n + i) * n..(h * n + i) * n + visible];
                let qi = &q_h[i * dh..(i + 1) * dh];
                for (j, p) in p_row.iter_mut().enumerate() {
                    *p = dot(qi, &k_h[j * dh..(j + 1) * dh]) * scale;
                }
                softmax_in_place(p_row);
                let o_row = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in p_row.iter().enumerate() {
                    for (o, &vv) in o_row.iter_mut().zip(&v_h[j * dh..(j + 1) * dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q.0, k.0, v.0]);
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            heads,
            probs,
        };
        self.push(out, op, rg, "attention")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::ConcatRows(ids), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::SliceRows { src: x.0, start }, rg, "slice_rows")
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.rg(&[table.0]);
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
        };
        self.push(out, op, rg, "gather")
    }

    /// Mean over masked-in rows of `-log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = tl.dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![n, vocab],
                right: vec![targets.len(), mask.len()],
            });
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::Contract("cross_entropy needs at least one masked-in row".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = 0.0;
        let mut kept = Vec::with_capacity(rows.len());
        for &r in &rows {
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = tl.row(r);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            probs.extend_from_slice(&p);
            kept.push(t);
        }
        let loss = Tensor::scalar(total / rows.len() as f64);
        let rg = self.rg(&[logits.0]);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: kept,
            rows,
            probs,
        };
        self.push(loss, op, rg, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Reshape(x.0), rg, "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let want = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(*a) {
                    let ga = slot(grads, *a, ta.len());
                    matmul_a_bt_acc(g, tb.data(), ga, m, k, n);
                }
                if want(*b) {
                    let gb = slot(grads, *b, tb.len());
                    matmul_at_b_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if want(i) {
                        axpy(slot(grads, i, g.len()), 1.0, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if want(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, gi), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gi * bv;
                    }
                }
                if want(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((o, gi), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gi * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if want(*x) {
                    axpy(slot(grads, *x, g.len()), 1.0, g);
                }
                if want(*bias) {
                    let d = self.nodes[*bias].value.len();
                    let gb = slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if want(*x) {
                    axpy(slot(grads, *x, g.len()), *s, g);
                }
            }
            Op::MulConst(x, c) => {
                if want(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((o, gi), cv) in gx.iter_mut().zip(g).zip(c) {
                        *o += gi * cv;
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let tx = &self.nodes[*x].value;
                    let gx = slot(grads, *x, g.len());
                    for ((o, gi), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *o += gi * gelu_parts(xv).1;
                    }
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = slot(grads, *x, g.len());
                    for ((gy_row, y_row), gx_row) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let s: f64 = gy_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx_row[c] += y_row[c] * (gy_row[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[*gain].value.len();
                let gain_data = self.nodes[*gain].value.data();
                if want(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (g_row, h_row) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += g_row[c] * h_row[c];
                        }
                    }
                }
                if want(*bias) {
                    let gb = slot(grads, *bias, d);
                    for g_row in g.chunks(d) {
                        for c in 0..d {
                            gb[c] += g_row[c];
                        }
                    }
                }
                if want(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (g_row, h_row)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dh[c] = g_row[c] * gain_data[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h_row).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += inv_std[r] * (dh[c] - mean_dh - h_row[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if want(p) {
                        axpy(slot(grads, p, len), 1.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { src, start } => {
                if want(*src) {
                    let ts = &self.nodes[*src].value;
                    let cols = ts.last_dim();
                    let gs = slot(grads, *src, ts.len());
                    axpy(&mut gs[start * cols..start * cols + g.len()], 1.0, g);
                }
            }
            Op::Gather { table, ids } => {
                if want(*table) {
                    let tt = &self.nodes[*table].value;
                    let cols = tt.last_dim();
                    let gt = slot(grads, *table, tt.len());
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * cols..(id + 1) * cols], 1.0, &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                probs,
            } => {
                if want(*logits) {
                    let tl = &self.nodes[*logits].value;
                    let vocab = tl.last_dim();
                    let scale = g[0] / rows.len() as f64;
                    let gl = slot(grads, *logits, tl.len());
                    for (j, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let out = &mut gl[r * vocab..(r + 1) * vocab];
                        let p = &probs[j * vocab..(j + 1) * vocab];
                        for c in 0..vocab {
                            out[c] += scale * p[c];
                        }
                        out[t] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    let gx = slot(grads, *x, self.nodes[*x].value.len());
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    axpy(slot(grads, *x, g.len()), 1.0, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tq = &self.nodes[q].value;
        let tk = &self.nodes[k].value;
        let tv = &self.nodes[v].value;
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let col = |i: usize| i * d + h * dh;
            for i in 0..n {
                let p_row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let go = &g[col(i)..col(i) + dh];
                let mut weighted = 0.0;
                for j in 0..n {
                    let p = p_row[j];
                    if p == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(go, &tv.data()[col(j)..col(j) + dh]);
                    weighted += p * dp[j];
                    for (o, &gv) in dv[col(j)..col(j) + dh].iter_mut().zip(go) {
                        *o += p * gv;
                    }
                }
                for j in 0..n {
                    let p = p_row[j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    let (qi, kj) = (col(i), col(j));
                    for c in 0..dh {
                        dq[qi + c] += ds * tk.data()[kj + c];
                        dk[kj + c] += ds * tq.data()[qi + c];
                    }
                }
            }
        }
        for (id, contrib) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[id].requires_grad {
                axpy(slot(grads, id, n * d), 1.0, &contrib);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zeros if `v` was never reached.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        let shape = graph.value(v).shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("gradient shape tracks value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed raw gradient, `None` when unreached.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of `f` around `x` (h = 1e-5).
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), false);
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let c = g.leaf(t(&[2, 1], &[3.0, 4.0]), false);
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        match g.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b0 = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
        // Weighted sum keeps the upstream gradient non-uniform.
        let w0 = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut r);
        let loss = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (va, vb, vw) = (g.leaf(a.clone(), true), g.leaf(b.clone(), true), g.leaf(w0.clone(), false));
            let m = g.matmul(va, vb).unwrap();
            let p = g.mul(m, vw).unwrap();
            let s = g.sum(p).unwrap();
            (g.value(s).item(), g, va, vb, s)
        };
        let (_, g, va, vb, s) = loss(&a0, &b0);
        let grads = g.backward(s).unwrap();
        let fd_a = finite_diff(&a0, &|a| loss(a, &b0).0);
        let fd_b = finite_diff(&b0, &|b| loss(&a0, b).0);
        assert!(max_rel_err(grads.wrt(&g, va).data(), &fd_a) <= 1e-6);
        assert!(max_rel_err(grads.wrt(&g, vb).data(), &fd_b) <= 1e-6);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 2], &[0.0, 0.0, 1000.0, 1000.0, 1.0f64.ln(), 3.0f64.ln()]), false);
        let y = g.softmax(x).unwrap();
        let y = g.value(y).data();
        assert_eq!(&y[0..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((y[4] - 0.25).abs() < 1e-15);
        assert!((y[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let vx = g.leaf(x.clone(), true);
            let vw = g.leaf(w0.clone(), false);
            let y = g.softmax(vx).unwrap();
            let p = g.mul(y, vw).unwrap();
            let s = g.sum(p).unwrap();
            (g.value(s).item(), g, vx, s)
        };
        let (_, g, vx, s) = f(&x0);
        let grads = g.backward(s).unwrap();
        let fd = finite_diff(&x0, &|x| f(x).0);
        assert!(max_rel_err(grads.wrt(&g, vx).data(), &fd) <= 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]), false);
        let gain = g.leaf(Tensor::full(&[2], 1.0), false);
        let bias = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let y = g.value(y).data();
        assert_eq!(&y[0..2], &[0.0, 0.0]);
        assert!((y[2] - 1.0).abs() < 1e-10 && (y[3] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[2, 8], -1.0, 1.0, &mut r);
        let g0 = Tensor::uniform(&[8], -1.0, 1.0, &mut r);
        let b0 = Tensor::uniform(&[8], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[2, 8], -1.0, 1.0, &mut r);
        let f = |x: &Tensor, gn: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (vx, vg, vb) = (g.leaf(x.clone(), true), g.leaf(gn.clone(), true), g.leaf(b.clone(), true));
            let vw = g.leaf(w0.clone(), false);
            let y = g.layer_norm(vx, vg, vb, 1e-5).unwrap();
            let p = g.mul(y, vw).unwrap();
            let s = g.sum(p).unwrap();
            (g.value(s).item(), g, [vx, vg, vb], s)
        };
        let (_, g, vars, s) = f(&x0, &g0, &b0);
        let grads = g.backward(s).unwrap();
        let fds = [
            finite_diff(&x0, &|x| f(x, &g0, &b0).0),
            finite_diff(&g0, &|gn| f(&x0, gn, &b0).0),
            finite_diff(&b0, &|b| f(&x0, &g0, b).0),
        ];
        for (v, fd) in vars.iter().zip(&fds) {
            assert!(max_rel_err(grads.wrt(&g, *v).data(), fd) <= 1e-5);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let l = g.leaf(t(&[1, 2], &[0.0, 1e3]), false);
        let loss = g.cross_entropy(l, &[1], &[true]).unwrap();
        assert!(g.value(loss).item() < 1e-12);

        let l = g.leaf(Tensor::zeros(&[1, 4]), false);
        let loss = g.cross_entropy(l, &[2], &[true]).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let l = g.leaf(t(&[1, 2], &[1.0f64.ln(), 3.0f64.ln()]), false);
        let loss = g.cross_entropy(l, &[0], &[true]).unwrap();
        assert!((g.value(loss).item() + 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[2, 4]), false);
        assert!(matches!(g.cross_entropy(l, &[4, 0], &[true, true]), Err(Error::Index { .. })));
        assert!(matches!(g.cross_entropy(l, &[0, 0], &[false, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut r = rng();
        let x0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.leaf(x0, true);
        let loss = g.cross_entropy(x, &[1, 2, 3], &[true, false, true]).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(&g, x);
        assert!(gx.row(1).iter().all(|&v| v == 0.0));
        assert!(gx.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.3, -2.0, 5.0]), true);
        let s = g.sum(w).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(&g, w).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        assert_eq!(g.backward(half).unwrap().wrt(&g, w).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unreached() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]), true);
        let unused = g.leaf(Tensor::full(&[3], 1.0), true);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, unused).data(), &[0.0; 3]);
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut r = rng();
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[5, 8], -1.0, 1.0, &mut r)).collect();
        let w0 = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut r);
        for mask in [AttentionMask::Causal, AttentionMask::Full] {
            let f = |qkv: &[Tensor]| {
                let mut g = Graph::new();
                let vs: Vec<Var> = qkv.iter().map(|x| g.leaf(x.clone(), true)).collect();
                let vw = g.leaf(w0.clone(), false);
                let o = g.attention(vs[0], vs[1], vs[2], 2, mask).unwrap();
                let p = g.mul(o, vw).unwrap();
                let s = g.sum(p).unwrap();
                (g.value(s).item(), g, vs, s)
            };
            let (_, g, vs, s) = f(&inputs);
            let grads = g.backward(s).unwrap();
            for which in 0..3 {
                let fd = finite_diff(&inputs[which], &|x| {
                    let mut perturbed = inputs.clone();
                    perturbed[which] = x.clone();
                    f(&perturbed).0
                });
                assert!(max_rel_err(grads.wrt(&g, vs[which]).data(), &fd) <= 1e-6, "{mask:?} input {which}");
            }
        }
    }

    #[test]
    fn gelu_gather_concat_slice_gradients() {
        let mut r = rng();
        let table0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let w0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let f = |table: &Tensor| {
            let mut g = Graph::new();
            let vt = g.leaf(table.clone(), true);
            let rows = g.gather(vt, &[2, 0, 2]).unwrap();
            let both = g.concat_rows(&[rows, vt]).unwrap();
            let mid = g.slice_rows(both, 1, 5).unwrap();
            let act = g.gelu(mid).unwrap();
            let vw = g.leaf(w0.clone(), false);
            let p = g.mul(act, vw).unwrap();
            let s = g.sum(p).unwrap();
            (g.value(s).item(), g, vt, s)
        };
        let (_, g, vt, s) = f(&table0);
        let grads = g.backward(s).unwrap();
        let fd = finite_diff(&table0, &|x| f(x).0);
        assert!(max_rel_err(grads.wrt(&g, vt).data(), &fd) <= 1e-6);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1], 1e308), false);
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[20, 7], -30.0, 30.0, &mut r), false);
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
