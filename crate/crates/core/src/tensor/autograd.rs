//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters and
//! constants enter by reference, so building a graph never copies weights.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! map keyed by parameter name; the graph is then dropped. A graph built
//! with [`Graph::inference`] stores values only and cannot be differentiated.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels::{self, AttnDims};
use super::param::Parameter;
use super::tensor::{ensure_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Softmax(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f32)>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f32, f32)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        past: Option<(&'a Tensor, &'a Tensor)>,
        probs: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<u32>>,
        scale: f32,
        probs: Vec<f32>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    requires_grad: bool,
    param: Option<&'a str>,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: HashMap<String, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }

    /// Sums another set of parameter gradients into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.params {
            match self.params.get_mut(&name) {
                Some(t) => t.add_assign(&g),
                None => {
                    self.params.insert(name, g);
                }
            }
        }
    }

    /// Adds the gradients into each matching `Parameter::grad`.
    pub fn accumulate_into<'p>(&self, params: impl IntoIterator<Item = &'p mut Parameter>) {
        for p in params {
            if let Some(g) = self.params.get(&p.name) {
                p.grad.add_assign(g);
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            recording: true,
        }
    }

    /// A value-only graph; nothing requires gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op<'a>, rg: bool, name: &'static str) -> Result<Var> {
        if self.recording {
            ensure_finite(&value, name)?;
        }
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Parameter leaf. Gradients flow to it only if it is trainable.
    pub fn param(&mut self, p: &'a Parameter) -> Var {
        let rg = self.recording && p.trainable;
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, rg);
        self.nodes[v.0].param = Some(p.name.as_str());
        v
    }

    /// Borrowed constant.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient (see [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.recording;
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_rg(&[a, b]);
        self.push_checked(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_rg(&[a, b]);
        self.push_checked(out, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_rg(&[a, b]);
        self.push_checked(out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        if r.len() != c {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                x.shape(),
                r.shape()
            )));
        }
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(r.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.any_rg(&[a, row]);
        self.push_checked(out, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.scale_in_place(k);
        let rg = self.any_rg(&[a]);
        self.push_checked(out, Op::Scale(a, k), rg, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(a));
        let rg = self.any_rg(&[a]);
        self.push_checked(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a));
        let rg = self.any_rg(&[a]);
        self.push_checked(out, Op::Softmax(a), rg, "softmax")
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.any_rg(&[a]);
        self.push_checked(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// `Σ wᵢ·xᵢ` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Dimension(format!(
                    "weighted_sum expects scalars, got {:?}",
                    t.shape()
                )));
            }
            total += w * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_rg(&vars);
        self.push_checked(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg, "weighted_sum")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm: last dim {c}, gain {:?}, bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let (out, stats) = kernels::layer_norm_forward(xv.data(), c, gv.data(), bv.data());
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_rg(&[x, gain, bias]);
        let stats = if rg { stats } else { Vec::new() };
        self.push_checked(out, Op::LayerNorm { x, gain, bias, stats }, rg, "layer_norm")
    }

    /// Multi-head attention of `q` over `[past; k]` / `[past; v]`.
    ///
    /// `past` holds cached key/value rows treated as constants. With
    /// `causal`, query `i` is at absolute position `past_len + i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        past: Option<(&'a Tensor, &'a Tensor)>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let m = qv.rows();
        let fresh = kv.rows();
        let past_len = past.map_or(0, |(pk, _)| pk.rows());
        let shapes_ok = kv.cols() == width
            && vv.cols() == width
            && vv.rows() == fresh
            && past.map_or(true, |(pk, pv)| {
                pk.cols() == width && pv.cols() == width && pv.rows() == past_len
            });
        if !shapes_ok || heads == 0 || width % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: q {:?} k {:?} v {:?} past {} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                past_len
            )));
        }
        let dims = AttnDims {
            m,
            past: past_len,
            fresh,
            width,
            heads,
            causal,
        };
        let raw_past = past.map(|(pk, pv)| (pk.data(), pv.data()));
        let (out, probs) = kernels::attention_forward(dims, qv.data(), kv.data(), vv.data(), raw_past);
        let out = Tensor::new(vec![m, width], out)?;
        let rg = self.any_rg(&[q, k, v]);
        let probs = if rg { probs } else { Vec::new() };
        self.push_checked(
            out,
            Op::Attention {
                q,
                k,
                v,
                dims,
                past,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let rows = t.rows();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index(format!("gather row {i} of {rows}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], out)?;
        let rg = self.any_rg(&[table]);
        self.push_checked(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// `scale · Σᵢ −log softmax(logitsᵢ)[labelᵢ]` over rows with a label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<u32>], scale: f32) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if labels.len() != lv.rows() {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                lv.rows()
            )));
        }
        let mut total = 0.0f64;
        for (r, l) in labels.iter().enumerate() {
            if let Some(y) = *l {
                let y = y as usize;
                if y >= c {
                    return Err(Error::Index(format!("label {y} outside vocabulary of {c}")));
                }
                total -= kernels::log_prob(lv.row(r), y) as f64;
            }
        }
        let rg = self.any_rg(&[logits]);
        let probs = if rg {
            kernels::softmax_rows(lv).into_data()
        } else {
            Vec::new()
        };
        let out = Tensor::scalar(total as f32 * scale);
        self.push_checked(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                scale,
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage("loss does not depend on any trainable value".into()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    match node.param {
                        Some(name) => match out.params.get_mut(name) {
                            Some(t) => t.add_assign(&gy),
                            None => {
                                out.params.insert(name.to_string(), gy);
                            }
                        },
                        None => {
                            out.leaves.insert(Var(i), gy);
                        }
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let nn = bv.cols();
                    if rg(*a) {
                        let da = slot(&mut grads, *a, av.shape());
                        kernels::gemm(m, nn, k, 1.0, gy.data(), nn, 1, bv.data(), 1, nn, 1.0, da, k, 1);
                    }
                    if rg(*b) {
                        let db = slot(&mut grads, *b, bv.shape());
                        kernels::gemm(k, m, nn, 1.0, av.data(), 1, k, gy.data(), nn, 1, 1.0, db, nn, 1);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if rg(v) {
                            let d = slot(&mut grads, v, gy.shape());
                            d.iter_mut().zip(gy.data()).for_each(|(x, g)| *x += g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if rg(*a) {
                        let d = slot(&mut grads, *a, av.shape());
                        for ((x, g), o) in d.iter_mut().zip(gy.data()).zip(bv.data()) {
                            *x += g * o;
                        }
                    }
                    if rg(*b) {
                        let d = slot(&mut grads, *b, bv.shape());
                        for ((x, g), o) in d.iter_mut().zip(gy.data()).zip(av.data()) {
                            *x += g * o;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*a) {
                        let d = slot(&mut grads, *a, gy.shape());
                        d.iter_mut().zip(gy.data()).for_each(|(x, g)| *x += g);
                    }
                    if rg(*row) {
                        let shape = self.value(*row).shape().to_vec();
                        let c = gy.cols();
                        let d = slot(&mut grads, *row, &shape);
                        for chunk in gy.data().chunks(c) {
                            d.iter_mut().zip(chunk).for_each(|(x, g)| *x += g);
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let d = slot(&mut grads, *a, gy.shape());
                    d.iter_mut().zip(gy.data()).for_each(|(x, g)| *x += k * g);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let d = slot(&mut grads, *a, av.shape());
                    for ((x, g), &inp) in d.iter_mut().zip(gy.data()).zip(av.data()) {
                        *x += g * kernels::gelu_grad_scalar(inp);
                    }
                }
                Op::Softmax(a) => {
                    let c = node.value.cols();
                    let d = slot(&mut grads, *a, gy.shape());
                    kernels::softmax_backward(node.value.data(), gy.data(), c, d);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let g = gy.data()[0];
                    let d = slot(&mut grads, *a, &shape);
                    d.iter_mut().for_each(|x| *x += g);
                }
                Op::WeightedSum(terms) => {
                    let g = gy.data()[0];
                    for &(v, w) in terms {
                        if rg(v) {
                            let shape = self.value(v).shape().to_vec();
                            slot(&mut grads, v, &shape)[0] += w * g;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let c = xv.cols();
                    let mut dx = rg(*x).then(|| vec![0.0; xv.len()]);
                    let mut dg = rg(*gain).then(|| vec![0.0; c]);
                    let mut db = rg(*bias).then(|| vec![0.0; c]);
                    kernels::layer_norm_backward(
                        xv.data(),
                        c,
                        gv.data(),
                        stats,
                        gy.data(),
                        dx.as_deref_mut(),
                        dg.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    for (v, d) in [(*x, dx), (*gain, dg), (*bias, db)] {
                        if let Some(d) = d {
                            let shape = self.value(v).shape().to_vec();
                            let s = slot(&mut grads, v, &shape);
                            s.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Attention { q, k, v, dims, past, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = rg(*q).then(|| vec![0.0; qv.len()]);
                    let mut dk = rg(*k).then(|| vec![0.0; kv.len()]);
                    let mut dv = rg(*v).then(|| vec![0.0; vv.len()]);
                    let raw_past = past.map(|(pk, pv)| (pk.data(), pv.data()));
                    kernels::attention_backward(
                        *dims,
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        raw_past,
                        probs,
                        gy.data(),
                        dq.as_deref_mut(),
                        dk.as_deref_mut(),
                        dv.as_deref_mut(),
                    );
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if let Some(d) = d {
                            let shape = self.value(var).shape().to_vec();
                            let s = slot(&mut grads, var, &shape);
                            s.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape().to_vec();
                    let c = gy.cols();
                    let d = slot(&mut grads, *table, &shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * c..(id + 1) * c];
                        dst.iter_mut().zip(gy.row(r)).for_each(|(a, b)| *a += b);
                    }
                }
                Op::CrossEntropy { logits, labels, scale, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let c = shape[shape.len() - 1];
                    let g = gy.data()[0] * scale;
                    let d = slot(&mut grads, *logits, &shape);
                    for (r, l) in labels.iter().enumerate() {
                        if let Some(y) = *l {
                            let pr = &probs[r * c..(r + 1) * c];
                            let dr = &mut d[r * c..(r + 1) * c];
                            for j in 0..c {
                                dr[j] += g * pr[j];
                            }
                            dr[y as usize] -= g;
                        }
                    }
                }
            }
        }
        for t in out.params.values().chain(out.leaves.values()) {
            ensure_finite(t, "backward")?;
        }
        Ok(out)
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f32] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

impl std::ops::Deref for Node<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.value
    }
}
