use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, HeadView};
use super::{Float, ParamId, ParamSet, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Attention mask for the packed multi-head operator.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Bidirectional; batch element `b` only sees its first `lens[b]` keys.
    KeyPadding(Vec<usize>),
    /// Explicit additive `T x T` matrix shared by every batch element and
    /// head: `0` attends, `-inf` blocks.
    Additive(Vec<f64>),
}

impl AttnMask {
    fn entry<F: Float>(&self, seq: usize, b: usize, i: usize, j: usize) -> Option<F> {
        match self {
            AttnMask::Causal => (j <= i).then(F::zero),
            AttnMask::KeyPadding(lens) => (j < lens[b]).then(F::zero),
            AttnMask::Additive(m) => {
                let v = m[i * seq + j];
                (v != f64::NEG_INFINITY).then(|| F::of(v))
            }
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        b_t: bool,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, F),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<(F, F)>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Rows {
        x: NodeId,
        idx: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        keep: Vec<F>,
    },
    Attention {
        qkv: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    HeadAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<F>,
        weights: Vec<F>,
    },
    LogSoftmaxGather {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    PpoClip {
        logp: NodeId,
        coeff: Vec<F>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<ParamId>,
}

/// Reverse-mode tape. Values are computed eagerly as operators are
/// recorded; [`Graph::backward`] walks the tape in reverse.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, node: NodeId) -> Option<&[F]> {
        self.grads[node.0].as_deref()
    }
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn zeros_like<F: Float>(t: &Tensor<F>) -> Vec<F> {
    vec![F::zero(); t.len()]
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op, param: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a trainable parameter; repeated calls reuse the node.
    pub fn param(&mut self, ps: &ParamSet<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let mut value = ps.get(id).clone();
        value.set_requires_grad(false);
        let n = self.push(value, Op::Leaf);
        self.nodes[n.0].param = Some(id);
        self.params.insert(id, n);
        n
    }

    /// `a @ b` (or `a @ b^T` with `b_t`).
    pub fn matmul(&mut self, a: NodeId, b: NodeId, b_t: bool) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if b_t { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        assert_eq!(k, bk, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![F::zero(); m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), b_t, &mut out, false);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(t, Op::MatMul { a, b, b_t })
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d_in) = (xv.rows(), xv.cols());
        let d_out = wv.cols();
        assert_eq!(d_in, wv.rows(), "linear {:?} x {:?}", xv.shape(), wv.shape());
        let mut out = vec![F::zero(); n * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), d_out);
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(n, d_in, d_out, xv.data(), false, wv.data(), false, &mut out, b.is_some());
        let t = Tensor::new(vec![n, d_out], out).expect("linear shape");
        self.push(t, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add {:?} + {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("add shape");
        self.push(t, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("scale shape");
        self.push(t, Op::Scale(x, s))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let mut y = zeros_like(xv);
        let stats = kernels::layer_norm_forward(xv.data(), d, self.value(gamma).data(), self.value(beta).data(), &mut y);
        let t = Tensor::new(xv.shape().to_vec(), y).expect("layer norm shape");
        self.push(t, Op::LayerNorm { x, gamma, beta, stats })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("gelu shape");
        self.push(t, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("tanh shape");
        self.push(t, Op::Tanh(x))
    }

    /// Row lookup: `[ids.len(), d]` from a `[vocab, d]` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < tv.rows(), "embedding id {id} >= {}", tv.rows());
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out).expect("embedding shape");
        self.push(t, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Gathers rows `idx` of a 2-D node.
    pub fn rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out).expect("rows shape");
        self.push(t, Op::Rows { x, idx: idx.to_vec() })
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let scale = F::of(1.0 / (1.0 - p));
        let keep: Vec<F> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { scale })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("dropout shape");
        self.push(t, Op::Dropout { x, keep })
    }

    /// Multi-head attention over a packed `[batch * seq, 3 * d]` projection
    /// (queries, keys, values side by side). Returns `[batch * seq, d]`.
    pub fn attention(&mut self, qkv: NodeId, batch: usize, seq: usize, heads: usize, mask: &AttnMask) -> NodeId {
        let qv = self.value(qkv);
        let d3 = qv.cols();
        assert_eq!(qv.rows(), batch * seq);
        assert_eq!(d3 % (3 * heads), 0);
        let d = d3 / 3;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::zero(); batch * seq * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let data = qv.data();
        for b in 0..batch {
            let mask_fn = |i: usize, j: usize| mask.entry::<F>(seq, b, i, j);
            for h in 0..heads {
                let base = b * seq * d3;
                let p0 = (b * heads + h) * seq * seq;
                kernels::attend_forward(
                    data,
                    HeadView {
                        offset: base + h * dh,
                        stride: d3,
                    },
                    data,
                    HeadView {
                        offset: base + d + h * dh,
                        stride: d3,
                    },
                    data,
                    HeadView {
                        offset: base + 2 * d + h * dh,
                        stride: d3,
                    },
                    seq,
                    seq,
                    dh,
                    scale,
                    &mask_fn,
                    &mut out,
                    HeadView {
                        offset: b * seq * d + h * dh,
                        stride: d,
                    },
                    &mut probs[p0..p0 + seq * seq],
                );
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out).expect("attention shape");
        self.push(
            t,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Single attention head `softmax(q k^T / sqrt(d_k) + mask) v` with an
    /// explicit additive `n x n` mask.
    pub fn head_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: &[f64]) -> NodeId {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n_q, dk) = (qt.rows(), qt.cols());
        let n_k = kt.rows();
        let dv = vt.cols();
        assert_eq!(mask.len(), n_q * n_k);
        assert_eq!(dk, dv, "head attention expects d_k == d_v");
        let scale = F::of(1.0 / (dk as f64).sqrt());
        let mut out = vec![F::zero(); n_q * dv];
        let mut probs = vec![F::zero(); n_q * n_k];
        let mask_fn = |i: usize, j: usize| {
            let m = mask[i * n_k + j];
            (m != f64::NEG_INFINITY).then(|| F::of(m))
        };
        kernels::attend_forward(
            qt.data(),
            HeadView { offset: 0, stride: dk },
            kt.data(),
            HeadView { offset: 0, stride: dk },
            vt.data(),
            HeadView { offset: 0, stride: dv },
            n_q,
            n_k,
            dk,
            scale,
            &mask_fn,
            &mut out,
            HeadView { offset: 0, stride: dv },
            &mut probs,
        );
        let t = Tensor::new(vec![n_q, dv], out).expect("head attention shape");
        self.push(t, Op::HeadAttention { q, k, v, probs })
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are ignored. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.rows() != targets.len() {
            bail!(Shape, "{} logit rows for {} targets", lv.rows(), targets.len());
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (row, t) in probs.chunks_exact_mut(c).zip(targets) {
            let mut logp = vec![F::zero(); c];
            super::log_softmax(row, &mut logp);
            if let Some(t) = *t {
                if t >= c {
                    bail!(Index, "target class {t} with {c} classes");
                }
                loss -= logp[t].f64();
                count += 1;
            }
            for (p, lp) in row.iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let loss = if count > 0 { loss / count as f64 } else { 0.0 };
        let t = Tensor::scalar(F::of(loss));
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// `sum_i w_i * BCE(sigmoid(z_i), y_i)` computed from logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[F], weights: &[F]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || targets.len() != weights.len() {
            bail!(
                Shape,
                "bce: {} logits, {} targets, {} weights",
                lv.len(),
                targets.len(),
                weights.len()
            );
        }
        let mut loss = F::zero();
        for ((&z, &y), &w) in lv.data().iter().zip(targets).zip(weights) {
            let l = z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
            loss += w * l;
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Per-row `log softmax(logits)[target]`, shape `[rows]`.
    pub fn log_softmax_gather(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.rows() != targets.len() {
            bail!(Shape, "{} logit rows for {} targets", lv.rows(), targets.len());
        }
        let mut probs = vec![F::zero(); lv.len()];
        let mut out = Vec::with_capacity(targets.len());
        for ((row, p), &t) in lv.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)).zip(targets) {
            if t >= c {
                bail!(Index, "target class {t} with {c} classes");
            }
            super::log_softmax(row, p);
            out.push(p[t]);
            p.iter_mut().for_each(|v| *v = v.exp());
        }
        let t = Tensor::new(vec![targets.len()], out)?;
        Ok(self.push(
            t,
            Op::LogSoftmaxGather {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted clipped surrogate `sum_i w_i * min(r_i A_i, clip(eps, A_i))`
    /// with `r_i = exp(logp_i - old_i)` and `clip(eps, A) = (1 + eps) A` for
    /// `A >= 0`, `(1 - eps) A` otherwise.
    pub fn ppo_clip(&mut self, logp: NodeId, old_logp: &[F], advantages: &[F], weights: &[F], eps: F) -> Result<NodeId> {
        let lv = self.value(logp);
        let n = lv.len();
        if old_logp.len() != n || advantages.len() != n || weights.len() != n {
            bail!(Shape, "ppo_clip expects {n} old log-probs, advantages and weights");
        }
        let mut total = F::zero();
        let mut coeff = Vec::with_capacity(n);
        for i in 0..n {
            let r = (lv.data()[i] - old_logp[i]).exp();
            if !r.is_finite() {
                bail!(Numerical, "non-finite probability ratio at token {i}");
            }
            let a = advantages[i];
            let unclipped = r * a;
            let clipped = clipped_advantage(a, eps);
            if unclipped <= clipped {
                total += weights[i] * unclipped;
                coeff.push(weights[i] * unclipped);
            } else {
                total += weights[i] * clipped;
                coeff.push(F::zero());
            }
        }
        let t = Tensor::scalar(total);
        Ok(self.push(t, Op::PpoClip { logp, coeff }))
    }

    /// Scalar `sum_i w_i x_i`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[F]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let s = xv.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Adds leaf gradients into the matching parameter buffers.
    pub fn accumulate(&self, grads: &Grads<F>, ps: &mut ParamSet<F>) {
        for (&pid, &node) in &self.params {
            if let Some(g) = grads.get(node) {
                let t = ps.get_mut(pid);
                if let Some(buf) = t.grad_mut() {
                    for (b, &v) in buf.iter_mut().zip(g) {
                        *b += v;
                    }
                }
            }
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], id: NodeId) -> &'a mut Vec<F> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                let da = self.acc(grads, a);
                if b_t {
                    kernels::gemm(m, n, k, g, false, bv.data(), false, da, true);
                } else {
                    kernels::gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                let db = self.acc(grads, b);
                if b_t {
                    kernels::gemm(n, m, k, g, true, av.data(), false, db, true);
                } else {
                    kernels::gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            &Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (n, d_in) = (xv.rows(), xv.cols());
                let d_out = wv.cols();
                let dx = self.acc(grads, x);
                kernels::gemm(n, d_out, d_in, g, false, wv.data(), true, dx, true);
                let dw = self.acc(grads, w);
                kernels::gemm(d_in, n, d_out, xv.data(), true, g, false, dw, true);
                if let Some(b) = b {
                    let db = self.acc(grads, b);
                    for row in g.chunks_exact(d_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for id in [a, b] {
                    let d = self.acc(grads, id);
                    for (d, &v) in d.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            &Op::Scale(x, s) => {
                let d = self.acc(grads, x);
                for (d, &v) in d.iter_mut().zip(g) {
                    *d += v * s;
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let dx = self.acc(grads, *x);
                kernels::layer_norm_backward(xv.data(), d, &gv, stats, g, dx, &mut dgamma, &mut dbeta);
                for (id, src) in [(*gamma, dgamma), (*beta, dbeta)] {
                    let dst = self.acc(grads, id);
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                let d = self.acc(grads, x);
                for ((d, &v), &gv) in d.iter_mut().zip(xv).zip(g) {
                    *d += gv * kernels::gelu_grad(v);
                }
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                let d = self.acc(grads, x);
                for ((d, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
                    *d += gv * (F::one() - yv * yv);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                let dt = self.acc(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Rows { x, idx } => {
                let d = node.value.cols();
                let dx = self.acc(grads, *x);
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[src * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let dx = self.acc(grads, *x);
                for ((d, &k), &gv) in dx.iter_mut().zip(keep).zip(g) {
                    *d += gv * k;
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let qv = self.value(*qkv);
                let d3 = qv.cols();
                let d = d3 / 3;
                let dh = d / heads;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let data = qv.data();
                let mut dq = vec![F::zero(); data.len()];
                let mut dk = vec![F::zero(); data.len()];
                let mut dv = vec![F::zero(); data.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * d3;
                        let p0 = (b * heads + h) * seq * seq;
                        let qh = HeadView {
                            offset: base + h * dh,
                            stride: d3,
                        };
                        let kh = HeadView {
                            offset: base + d + h * dh,
                            stride: d3,
                        };
                        let vh = HeadView {
                            offset: base + 2 * d + h * dh,
                            stride: d3,
                        };
                        kernels::attend_backward(
                            data,
                            qh,
                            data,
                            kh,
                            data,
                            vh,
                            seq,
                            seq,
                            dh,
                            scale,
                            &probs[p0..p0 + seq * seq],
                            g,
                            HeadView {
                                offset: b * seq * d + h * dh,
                                stride: d,
                            },
                            &mut dq,
                            &mut dk,
                            &mut dv,
                        );
                    }
                }
                let dst = self.acc(grads, *qkv);
                for i in 0..dst.len() {
                    dst[i] += dq[i] + dk[i] + dv[i];
                }
            }
            Op::HeadAttention { q, k, v, probs } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n_q, dk) = (qt.rows(), qt.cols());
                let n_k = kt.rows();
                let scale = F::of(1.0 / (dk as f64).sqrt());
                let mut dq = vec![F::zero(); qt.len()];
                let mut dkk = vec![F::zero(); kt.len()];
                let mut dv = vec![F::zero(); vt.len()];
                let view = HeadView { offset: 0, stride: dk };
                kernels::attend_backward(
                    qt.data(),
                    view,
                    kt.data(),
                    view,
                    vt.data(),
                    view,
                    n_q,
                    n_k,
                    dk,
                    scale,
                    probs,
                    g,
                    view,
                    &mut dq,
                    &mut dkk,
                    &mut dv,
                );
                for (id, src) in [(*q, dq), (*k, dkk), (*v, dv)] {
                    let dst = self.acc(grads, id);
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = self.value(*logits).cols();
                let s = g[0] / F::of(*count as f64);
                let dl = self.acc(grads, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        dl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let z = self.value(*logits).data();
                let dl = self.acc(grads, *logits);
                for i in 0..z.len() {
                    let sig = F::one() / (F::one() + (-z[i]).exp());
                    dl[i] += g[0] * weights[i] * (sig - targets[i]);
                }
            }
            Op::LogSoftmaxGather { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let dl = self.acc(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        dl[r * c + j] += g[r] * (onehot - probs[r * c + j]);
                    }
                }
            }
            Op::PpoClip { logp, coeff } => {
                let dl = self.acc(grads, *logp);
                for (d, &c) in dl.iter_mut().zip(coeff) {
                    *d += g[0] * c;
                }
            }
            Op::WeightedSum { x, weights } => {
                let dx = self.acc(grads, *x);
                for (d, &w) in dx.iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }
        }
    }
}

/// `(1 + eps) A` for `A >= 0`, `(1 - eps) A` otherwise.
pub(crate) fn clipped_advantage<F: Float>(a: F, eps: F) -> F {
    if a >= F::zero() {
        (F::one() + eps) * a
    } else {
        (F::one() - eps) * a
    }
}

/// Output of one self-attention head:
/// `softmax(H W_Q (H W_K)^T / sqrt(d_k) + M) H W_V`.
///
/// `mask` is `N x N` with entries `0` (attend) or `-inf` (block). A row with
/// every entry blocked yields a zero output row.
pub fn attention_head<F: Float>(
    h_prev: &Tensor<F>,
    w_q: &Tensor<F>,
    w_k: &Tensor<F>,
    w_v: &Tensor<F>,
    mask: &Tensor<F>,
) -> Result<Tensor<F>> {
    if h_prev.shape().len() != 2 {
        bail!(Shape, "H must be N x d, got {:?}", h_prev.shape());
    }
    let (n, d) = (h_prev.rows(), h_prev.cols());
    for (name, w) in [("W_Q", w_q), ("W_K", w_k), ("W_V", w_v)] {
        if w.shape().len() != 2 || w.rows() != d {
            bail!(Shape, "{name} must be {d} x d_k, got {:?}", w.shape());
        }
    }
    let dk = w_q.cols();
    if w_k.cols() != dk || w_v.cols() != dk {
        bail!(Shape, "projection widths differ");
    }
    if mask.shape() != [n, n] {
        bail!(Shape, "mask must be {n} x {n}, got {:?}", mask.shape());
    }
    for &m in mask.data() {
        if m != F::zero() && m != F::neg_infinity() {
            bail!(Shape, "mask entries must be 0 or -inf, got {m}");
        }
    }
    let mut g = Graph::new();
    let h = g.constant(h_prev.clone());
    let wq = g.constant(w_q.clone());
    let wk = g.constant(w_k.clone());
    let wv = g.constant(w_v.clone());
    let q = g.matmul(h, wq, false);
    let k = g.matmul(h, wk, false);
    let v = g.matmul(h, wv, false);
    let m: Vec<f64> = mask.data().iter().map(|v| v.f64()).collect();
    let out = g.head_attention(q, k, v, &m);
    Ok(g.value(out).clone())
}
