//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.
//! Activations are treated as 2-D `[rows x features]` matrices; sequence
//! structure is passed explicitly to the ops that need it (attention).

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Mask(Var, Vec<T>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Mean(Var),
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Learnable parameters of one attention layer, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_query: Var,
    pub b_query: Var,
    pub w_key: Var,
    pub b_key: Var,
    pub w_value: Var,
    pub b_value: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf backed by a tensor shared with the caller, so large weights are
    /// not copied onto the tape.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[.. x k] . b[k x n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), bv.shape()[0], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Adds a `[d]` vector to every row of `x[.. x d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != xv.last_dim() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let d = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    /// `x . w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Scale(x, c))
    }

    /// Normalizes over the last axis with `1/d` variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        if eps < T::zero() {
            return Err(Error::Config("layer_norm eps must be non-negative".into()));
        }
        let rows = xv.rows();
        let dt = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let denom = var + eps;
            // zero-variance rows normalize to zero rather than NaN
            let rs = if denom > T::zero() { T::one() / denom.sqrt() } else { T::zero() };
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        Ok(self.mask(x, mask))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::dim("mul_const", self.value(x).shape(), c.shape()));
        }
        Ok(self.mask(x, c.data().to_vec()))
    }

    fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data).expect("mask shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Mask(x, mask))
    }

    /// Keeps the `k` largest entries of every row and zeroes the rest.
    /// Ties at the cut are resolved in favour of the lower index.
    pub fn top_k_mask(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let h = xv.last_dim();
        if k == 0 || k > h {
            return Err(Error::Config(format!("top-k k={k} outside [1, {h}]")));
        }
        let mut mask = vec![T::zero(); xv.len()];
        for r in 0..xv.rows() {
            for j in top_k_indices(xv.row(r), k) {
                mask[r * h + j] = T::one();
            }
        }
        Ok(self.mask(x, mask))
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len() x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::dim("embedding", tv.shape(), &[ids.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Scaled dot-product attention with a causal mask on already projected
    /// `q`, `k`, `v` of shape `[batch*seq x d]`, split into `heads` heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        let d = qv.last_dim();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if qv.rows() != batch * seq {
            return Err(Error::dim("attention", qv.shape(), &[batch, seq, d]));
        }
        let hd = d / heads;
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..hd];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + off..][..hd];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    probs[pbase + i * seq..][..=i].copy_from_slice(&scores[..=i]);
                    let oi = &mut out[(b * seq + i) * d + off..][..hd];
                    for j in 0..=i {
                        let p = scores[j];
                        let vj = &vd[(b * seq + j) * d + off..][..hd];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape(), out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities `[batch x heads x seq x seq]` saved by an
    /// [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                batch,
                seq,
                heads,
                probs,
                ..
            } => Tensor::new(&[*batch, *heads, *seq, *seq], probs.clone()).ok(),
            _ => None,
        }
    }

    /// Multi-head causal self-attention over `x[batch*seq x d]`, including
    /// the query/key/value and output projections.
    pub fn causal_self_attention(
        &mut self,
        x: Var,
        p: &AttentionParams,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let d = self.value(x).last_dim();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let q = self.linear(x, p.w_query, p.b_query)?;
        let k = self.linear(x, p.w_key, p.b_key)?;
        let v = self.linear(x, p.w_value, p.b_value)?;
        let ctx = self.attention(q, k, v, batch, seq, heads)?;
        let out = self.linear(ctx, p.w_out, p.b_out)?;
        Ok((out, ctx))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = crate::tensor::softmax_rows(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Softmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.last_dim();
        let n = lv.rows();
        if n != targets.len() || n == 0 {
            return Err(Error::dim("softmax_cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::Index {
                    what: "class",
                    index: t,
                    bound: classes,
                });
            }
            let row = &mut probs[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += (lse - row[t]).as_f64();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = T::from_f64(total / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared elementwise error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.is_empty() {
            return Err(Error::dim("mse", av.shape(), bv.shape()));
        }
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let e = (x - y).as_f64();
                e * e
            })
            .sum();
        let value = Tensor::scalar(T::from_f64(sum / av.len() as f64));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mse(a, b)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / xv.len().max(1) as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(T::from_f64(m)), rg, Op::Mean(x))
    }

    /// Reverse sweep from the scalar `loss`. Every reachable node that
    /// requires a gradient ends up with one (zeros if nothing flowed).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[1]));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            for input in self.inputs(i) {
                reachable[input.0] = true;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                let n = self.nodes[i].value.len();
                self.nodes[i].grad = Some(vec![T::zero(); n]);
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Mask(x, _)
            | Op::Softmax(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), bv.shape()[0], bv.shape()[1]);
                let mut out = Vec::new();
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, bv.data(), true, T::zero(), &mut da);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g, false, T::zero(), &mut db);
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias(x, b) => {
                let d = val(*b).len();
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d.max(1)) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let dt = T::from_f64(d as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    let (mdh, mdhh) = (sum_dh / dt, sum_dh_h / dt);
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rs * (dh - mdh - hr[j] * mdhh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Gelu(x) => {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three_a = T::from_f64(3.0 * GELU_A);
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three_a * v * v);
                        gv * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Mask(x, mask) => vec![(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())],
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                g,
                probs,
                (*batch, *seq, *heads),
            )
            .into_iter()
            .zip([*q, *k, *v])
            .map(|(grad, var)| (var, grad))
            .collect(),
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let dot_gy: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot_gy);
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = val(*logits).last_dim();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * classes + t] -= scale;
                }
                vec![(*logits, dl)]
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let c = T::from_f64(2.0) * g[0] / T::from_f64(av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    probs: &[T],
    (batch, seq, heads): (usize, usize, usize),
) -> [Vec<T>; 3] {
    let d = q.len() / (batch * seq).max(1);
    let hd = d / heads;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let gi = &g[(b * seq + i) * d + off..][..hd];
                let pi = &probs[pbase + i * seq..][..=i];
                for j in 0..=i {
                    let vj = &v[(b * seq + j) * d + off..][..hd];
                    dp[j] = dot(gi, vj);
                    let dvj = &mut dv[(b * seq + j) * d + off..][..hd];
                    for (acc, &x) in dvj.iter_mut().zip(gi) {
                        *acc += pi[j] * x;
                    }
                }
                let weighted: T = (0..=i).map(|j| pi[j] * dp[j]).sum();
                let qi_row = (b * seq + i) * d + off;
                for j in 0..=i {
                    let ds = pi[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj_row = (b * seq + j) * d + off;
                    for t in 0..hd {
                        dq[qi_row + t] += ds * k[kj_row + t];
                        dk[kj_row + t] += ds * q[qi_row + t];
                    }
                }
            }
        }
    }
    [dq, dk, dv]
}

/// Indices of the `k` largest values, ties resolved by lower index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Non-differentiable top-k over the last axis of a plain tensor.
pub fn top_k_mask<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let h = x.last_dim();
    if k == 0 || k > h {
        return Err(Error::Config(format!("top-k k={k} outside [1, {h}]")));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        for j in top_k_indices(row, k) {
            out.data_mut()[r * h + j] = row[j];
        }
    }
    Ok(out)
}
