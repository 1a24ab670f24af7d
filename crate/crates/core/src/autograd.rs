//! Reverse-mode differentiation over a Wengert tape of tensor primitives.
//!
//! Every primitive appends one node holding its output value; the node's
//! inputs always precede it, so a single reverse walk over the node list is
//! a valid topological sweep. Leaves may borrow their values (model weights
//! are never copied onto the tape) and only leaves marked `requires_grad`
//! receive gradients. A tape can be swept once; call [`Tape::reset`] to reuse
//! it.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{ClpError, Result};
use crate::functional::{softmax_row, KL_Q_FLOOR};
use crate::tensor::{gemm, MatRef, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, Real),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeometry,
        probs: Vec<Real>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<Real>,
    },
    KlDiv {
        logits: Var,
        target: Vec<Real>,
        q: Vec<Real>,
    },
    Sum(Var),
}

struct Node<'m> {
    value: Cow<'m, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct AttnGeometry {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

impl AttnGeometry {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Offset of head `h` of sequence `b` inside a `[batch*seq, width]` buffer.
    fn offset(&self, pair: usize) -> usize {
        let (b, h) = (pair / self.heads, pair % self.heads);
        b * self.seq * self.width() + h * self.head_dim
    }

    fn view<'a>(&self, data: &'a [Real], pair: usize) -> MatRef<'a> {
        MatRef::strided(&data[self.offset(pair)..], self.seq, self.head_dim, self.width(), 1)
    }

    fn pairs(&self) -> usize {
        self.batch * self.heads
    }

    /// Adds a per-pair `[seq, head_dim]` block into a `[batch*seq, width]` buffer.
    fn scatter_add(&self, dst: &mut [Real], pair: usize, block: &[Real]) {
        let base = self.offset(pair);
        for t in 0..self.seq {
            let row = &mut dst[base + t * self.width()..][..self.head_dim];
            for (d, s) in row.iter_mut().zip(&block[t * self.head_dim..][..self.head_dim]) {
                *d += *s;
            }
        }
    }
}

/// Gradients produced by one backward sweep, keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` for anything else.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of leaves that received a gradient entry.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
pub struct Tape<'m> {
    nodes: Vec<Node<'m>>,
    swept: bool,
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.swept = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: impl Into<Cow<'m, Tensor>>, requires_grad: bool) -> Var {
        self.push(value.into(), Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Cow<'m, Tensor>>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Cow<'m, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(ClpError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `x @ w` where `x` is `[.., k]` (leading axes flattened) and `w` is `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(ClpError::Shape(format!(
                "matmul {:?} @ {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (rows, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; rows * n];
        gemm(1.0, MatRef::new(xv.data(), rows, k), MatRef::new(wv.data(), k, n), 0.0, &mut out, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.record(Tensor::new(shape, out)?, Op::MatMul(x, w), &[x, w]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(Real) -> Real) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::new(xv.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[d]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != [xv.last_dim()] {
            return Err(ClpError::Shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let d = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += *b;
            }
        }
        Ok(self.record(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(ClpError::Shape(format!(
                "scale_by expects a scalar, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let out = self.map(x, |v| v * sv);
        Ok(self.record(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Var {
        let out = self.map(x, |v| scale * v + shift);
        self.record(out, Op::Affine(x, scale), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.record(out, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| gelu(v).0);
        self.record(out, Op::Gelu(x), &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(ClpError::Shape(format!(
                    "layer_norm parameter {:?} for input {:?}",
                    self.value(p).shape(),
                    xv.shape()
                )));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..][..d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv as Real;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * inv) as Real;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let keep = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        Ok(self.record(Tensor::new(shape, out)?, op, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(ClpError::NumericDomain("softmax input is not finite".into()));
        }
        let mut out = xv.clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            softmax_row(row);
        }
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(ClpError::Shape(format!("embedding table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(ClpError::Data(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..][..d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.record(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Causal multi-head self attention. `q`, `k`, `v` are `[batch*seq, width]`
    /// with heads laid out contiguously along the width.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let qv = self.value(q);
        let (rows, width) = (qv.rows(), qv.last_dim());
        if batch == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(ClpError::Shape(format!(
                "attention over {:?} with batch {batch}, heads {heads}",
                qv.shape()
            )));
        }
        let geom = AttnGeometry {
            batch,
            seq: rows / batch,
            heads,
            head_dim: width / heads,
        };
        let (qd, kd, vd) = (qv.data(), self.value(k).data(), self.value(v).data());
        let scale = 1.0 / (geom.head_dim as Real).sqrt();
        let t = geom.seq;
        let per_pair: Vec<(Vec<Real>, Vec<Real>)> = (0..geom.pairs())
            .into_par_iter()
            .map(|pair| {
                let mut p = vec![0.0; t * t];
                gemm(scale, geom.view(qd, pair), geom.view(kd, pair).t(), 0.0, &mut p, t);
                for i in 0..t {
                    softmax_row(&mut p[i * t..i * t + i + 1]);
                    p[i * t + i + 1..(i + 1) * t].fill(0.0);
                }
                let mut o = vec![0.0; t * geom.head_dim];
                gemm(1.0, MatRef::new(&p, t, t), geom.view(vd, pair), 0.0, &mut o, geom.head_dim);
                (p, o)
            })
            .collect();
        let mut out = vec![0.0; rows * width];
        let keep = self.any_grad(&[q, k, v]);
        let mut probs = Vec::with_capacity(if keep { geom.pairs() * t * t } else { 0 });
        for (pair, (p, o)) in per_pair.into_iter().enumerate() {
            geom.scatter_add(&mut out, pair, &o);
            if keep {
                probs.extend_from_slice(&p);
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.record(value, Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    /// Mean next-token cross-entropy of `[rows, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(ClpError::Shape(format!(
                "cross_entropy: {} rows vs {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(ClpError::Data(format!("target {bad} outside vocabulary of {vocab}")));
        }
        if !lv.is_finite() {
            return Err(ClpError::NumericDomain("cross_entropy logits are not finite".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, (row, &t)) in probs.chunks_exact_mut(vocab).zip(targets).enumerate() {
            let lse = softmax_row(row);
            total += lse - lv.data()[r * vocab + t] as f64;
        }
        let loss = (total / targets.len() as f64) as Real;
        let keep = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs: if keep { probs } else { Vec::new() },
        };
        Ok(self.record(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over rows of `KL(target || softmax(logits))`. `target` holds one
    /// probability row per logits row; the model side is floored at
    /// [`KL_Q_FLOOR`].
    pub fn kl_div(&mut self, target: &[Real], logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if target.len() != lv.numel() {
            return Err(ClpError::Shape(format!(
                "kl_div: {} target values for logits {:?}",
                target.len(),
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(ClpError::NumericDomain("kl_div logits are not finite".into()));
        }
        let vocab = lv.last_dim();
        let rows = lv.rows();
        let mut q = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, qrow) in q.chunks_exact_mut(vocab).enumerate() {
            let lse = softmax_row(qrow);
            let zrow = &lv.data()[r * vocab..][..vocab];
            let prow = &target[r * vocab..][..vocab];
            for j in 0..vocab {
                let p = prow[j] as f64;
                if p > 0.0 {
                    let log_q = if qrow[j] as f64 >= KL_Q_FLOOR {
                        zrow[j] as f64 - lse
                    } else {
                        KL_Q_FLOOR.ln()
                    };
                    total += p * (p.ln() - log_q);
                }
            }
        }
        let loss = (total / rows as f64) as Real;
        let keep = self.any_grad(&[logits]);
        let op = Op::KlDiv {
            logits,
            target: if keep { target.to_vec() } else { Vec::new() },
            q: if keep { q } else { Vec::new() },
        };
        Ok(self.record(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(Tensor::scalar(total as Real), Op::Sum(x), &[x])
    }

    /// Sweeps the tape backwards from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.swept {
            return Err(ClpError::Contract(
                "tape already swept; reset it before another backward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(ClpError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.swept = true;

        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(
                    Tensor::new(
                        node.value.shape().to_vec(),
                        g.unwrap_or_else(|| vec![0.0; node.value.numel()]),
                    )
                    .expect("gradient matches leaf shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut acc = |v: Var, contrib: Vec<Real>| accumulate(grads, v, contrib);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                let gm = MatRef::new(g, rows, n);
                if needs(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm(1.0, gm, MatRef::new(wv.data(), k, n).t(), 0.0, &mut dx, k);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(1.0, MatRef::new(xv.data(), rows, k).t(), gm, 0.0, &mut dw, n);
                    acc(*w, dw);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    acc(*x, g.to_vec());
                }
                if needs(*bias) {
                    let d = val(*bias).numel();
                    let mut db = vec![0.0f64; d];
                    for row in g.chunks_exact(d) {
                        for (s, v) in db.iter_mut().zip(row) {
                            *s += *v as f64;
                        }
                    }
                    acc(*bias, db.into_iter().map(|v| v as Real).collect());
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s).item();
                if needs(*x) {
                    acc(*x, g.iter().map(|v| v * sv).collect());
                }
                if needs(*s) {
                    let ds: f64 = g.iter().zip(val(*x).data()).map(|(g, x)| (g * x) as f64).sum();
                    acc(*s, vec![ds as Real]);
                }
            }
            Op::Affine(x, scale) => acc(*x, g.iter().map(|v| v * scale).collect()),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, g.iter().zip(xv).map(|(g, &x)| g * gelu(x).1).collect());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += (grow[j] * hrow[j]) as f64;
                            db[j] += grow[j] as f64;
                        }
                    }
                    if needs(*gamma) {
                        acc(*gamma, dg.into_iter().map(|v| v as Real).collect());
                    }
                    if needs(*beta) {
                        acc(*beta, db.into_iter().map(|v| v as Real).collect());
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rstd.len() {
                        let grow = &g[r * d..][..d];
                        let hrow = &xhat[r * d..][..d];
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (grow[j] * gam[j]) as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j] as f64;
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = (grow[j] * gam[j]) as f64;
                            dx[r * d + j] =
                                (rstd[r] as f64 * (dh - mean_dh - hrow[j] as f64 * mean_dh_h)) as Real;
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| (g * y) as f64).sum();
                    for j in 0..d {
                        drow[j] = yrow[j] * (grow[j] - dot as Real);
                    }
                }
                acc(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (row, &i) in g.chunks_exact(d).zip(ids) {
                    for (s, v) in dt[i * d..][..d].iter_mut().zip(row) {
                        *s += *v;
                    }
                }
                acc(*table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let (t, hd) = (geom.seq, geom.head_dim);
                let scale = 1.0 / (hd as Real).sqrt();
                let per_pair: Vec<[Vec<Real>; 3]> = (0..geom.pairs())
                    .into_par_iter()
                    .map(|pair| {
                        let p = &probs[pair * t * t..][..t * t];
                        let pm = MatRef::new(p, t, t);
                        let go = geom.view(g, pair);
                        let mut dv = vec![0.0; t * hd];
                        gemm(1.0, pm.t(), go, 0.0, &mut dv, hd);
                        let mut ds = vec![0.0; t * t];
                        gemm(1.0, go, geom.view(vd, pair).t(), 0.0, &mut ds, t);
                        for i in 0..t {
                            let row = &mut ds[i * t..(i + 1) * t];
                            let prow = &p[i * t..(i + 1) * t];
                            let dot: f64 = row.iter().zip(prow).map(|(d, p)| (d * p) as f64).sum();
                            for j in 0..t {
                                row[j] = prow[j] * (row[j] - dot as Real);
                            }
                        }
                        let dsm = MatRef::new(&ds, t, t);
                        let mut dq = vec![0.0; t * hd];
                        gemm(scale, dsm, geom.view(kd, pair), 0.0, &mut dq, hd);
                        let mut dk = vec![0.0; t * hd];
                        gemm(scale, dsm.t(), geom.view(qd, pair), 0.0, &mut dk, hd);
                        [dq, dk, dv]
                    })
                    .collect();
                let n = g.len();
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                for (pair, [bq, bk, bv]) in per_pair.iter().enumerate() {
                    geom.scatter_add(&mut dq, pair, bq);
                    geom.scatter_add(&mut dk, pair, bk);
                    geom.scatter_add(&mut dv, pair, bv);
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        acc(var, d);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = val(*logits).last_dim();
                let scale = g[0] / targets.len() as Real;
                let mut dz = probs.clone();
                for (row, &t) in dz.chunks_exact_mut(vocab).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, dz);
            }
            Op::KlDiv { logits, target, q } => {
                let vocab = val(*logits).last_dim();
                let rows = q.len() / vocab;
                let scale = g[0] / rows as Real;
                let mut dz = vec![0.0; q.len()];
                for r in 0..rows {
                    let qrow = &q[r * vocab..][..vocab];
                    let prow = &target[r * vocab..][..vocab];
                    let live = |j: usize| prow[j] > 0.0 && qrow[j] as f64 >= KL_Q_FLOOR;
                    let mass: f64 = (0..vocab).filter(|&j| live(j)).map(|j| prow[j] as f64).sum();
                    for j in 0..vocab {
                        let own = if live(j) { prow[j] as f64 } else { 0.0 };
                        dz[r * vocab + j] = ((qrow[j] as f64 * mass - own) as Real) * scale;
                    }
                }
                acc(*logits, dz);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()]),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<Real>>], v: Var, contrib: Vec<Real>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: Real) -> (Real, Real) {
    const C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: Real = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}
