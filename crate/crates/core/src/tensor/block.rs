//! Pre-norm transformer block shared by the decoder and the encoder.
//!
//! `x -> x + A(LN1(x))` followed by the per-position transform
//! `z -> z + W2 gelu(W1 LN2(z))`.

use rand::Rng;

use super::kernels::{self, HeadView};
use super::{init_normal, AttnMask, Float, Graph, NodeId, ParamId, ParamSet, Tensor};
use crate::error::{bail, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Block {
    pub d_model: usize,
    pub n_heads: usize,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub(crate) fn ones<F: Float>(n: usize) -> Tensor<F> {
    Tensor::new(vec![n], vec![F::one(); n]).expect("vector shape")
}

impl Block {
    pub fn new<F: Float, R: Rng + ?Sized>(ps: &mut ParamSet<F>, prefix: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        let d = d_model;
        let mut normal =
            |ps: &mut ParamSet<F>, name: &str, shape: &[usize]| ps.add(format!("{prefix}.{name}"), init_normal(shape, INIT_STD, rng));
        let qkv_w = normal(ps, "attn.qkv.w", &[d, 3 * d]);
        let proj_w = normal(ps, "attn.proj.w", &[d, d]);
        let fc_w = normal(ps, "mlp.fc.w", &[d, 4 * d]);
        let out_w = normal(ps, "mlp.proj.w", &[4 * d, d]);
        Block {
            d_model,
            n_heads,
            ln1_g: ps.add(format!("{prefix}.ln1.g"), ones(d)),
            ln1_b: ps.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[d])),
            qkv_w,
            qkv_b: ps.add(format!("{prefix}.attn.qkv.b"), Tensor::zeros(&[3 * d])),
            proj_w,
            proj_b: ps.add(format!("{prefix}.attn.proj.b"), Tensor::zeros(&[d])),
            ln2_g: ps.add(format!("{prefix}.ln2.g"), ones(d)),
            ln2_b: ps.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[d])),
            fc_w,
            fc_b: ps.add(format!("{prefix}.mlp.fc.b"), Tensor::zeros(&[4 * d])),
            out_w,
            out_b: ps.add(format!("{prefix}.mlp.proj.b"), Tensor::zeros(&[d])),
        }
    }

    /// Records the block on the tape. `x` is `[batch * seq, d_model]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: NodeId, batch: usize, seq: usize, mask: &AttnMask) -> NodeId {
        let attn = self.attention_branch(g, ps, x, batch, seq, mask);
        let z = g.add(x, attn);
        self.feature_transform(g, ps, z)
    }

    /// Self-attention output `A(x)` (pre-norm, projected back to `d_model`).
    pub fn attention_branch<F: Float>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        x: NodeId,
        batch: usize,
        seq: usize,
        mask: &AttnMask,
    ) -> NodeId {
        let (g1, b1) = (g.param(ps, self.ln1_g), g.param(ps, self.ln1_b));
        let h = g.layer_norm(x, g1, b1);
        let (w, b) = (g.param(ps, self.qkv_w), g.param(ps, self.qkv_b));
        let qkv = g.linear(h, w, Some(b));
        let a = g.attention(qkv, batch, seq, self.n_heads, mask);
        let (w, b) = (g.param(ps, self.proj_w), g.param(ps, self.proj_b));
        g.linear(a, w, Some(b))
    }

    /// Position-wise transform `z + MLP(LN2(z))`.
    pub fn feature_transform<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, z: NodeId) -> NodeId {
        let (g2, b2) = (g.param(ps, self.ln2_g), g.param(ps, self.ln2_b));
        let h = g.layer_norm(z, g2, b2);
        let (w, b) = (g.param(ps, self.fc_w), g.param(ps, self.fc_b));
        let u = g.linear(h, w, Some(b));
        let u = g.gelu(u);
        let (w, b) = (g.param(ps, self.out_w), g.param(ps, self.out_b));
        let m = g.linear(u, w, Some(b));
        g.add(z, m)
    }

    /// Cached causal inference over new rows of `x` (updated in place).
    ///
    /// Each chunk's rows are appended to its cache and attend to every
    /// earlier cached position plus the chunk's own prefix.
    pub fn infer<F: Float>(&self, ps: &ParamSet<F>, x: &mut [F], chunks: &[std::ops::Range<usize>], caches: &mut [&mut LayerCache<F>]) {
        let d = self.d_model;
        let n = x.len() / d;
        let dh = d / self.n_heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut h = vec![F::zero(); n * d];
        kernels::layer_norm_forward(x, d, ps.get(self.ln1_g).data(), ps.get(self.ln1_b).data(), &mut h);
        let mut qkv = vec![F::zero(); n * 3 * d];
        affine(&h, n, d, ps.get(self.qkv_w).data(), ps.get(self.qkv_b).data(), 3 * d, &mut qkv);

        let mut attn = vec![F::zero(); n * d];
        for (rows, cache) in chunks.iter().zip(caches.iter_mut()) {
            let past = cache.len;
            for r in rows.clone() {
                cache.k.extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                cache.v.extend_from_slice(&qkv[r * 3 * d + 2 * d..r * 3 * d + 3 * d]);
            }
            cache.len += rows.len();
            let n_q = rows.len();
            let n_k = cache.len;
            let mut probs = vec![F::zero(); n_q * n_k];
            let mask = |i: usize, j: usize| (j <= past + i).then(F::zero);
            for hd in 0..self.n_heads {
                kernels::attend_forward(
                    &qkv,
                    HeadView {
                        offset: rows.start * 3 * d + hd * dh,
                        stride: 3 * d,
                    },
                    &cache.k,
                    HeadView {
                        offset: hd * dh,
                        stride: d,
                    },
                    &cache.v,
                    HeadView {
                        offset: hd * dh,
                        stride: d,
                    },
                    n_q,
                    n_k,
                    dh,
                    scale,
                    &mask,
                    &mut attn,
                    HeadView {
                        offset: rows.start * d + hd * dh,
                        stride: d,
                    },
                    &mut probs,
                );
            }
        }
        let mut proj = vec![F::zero(); n * d];
        affine(&attn, n, d, ps.get(self.proj_w).data(), ps.get(self.proj_b).data(), d, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += *b;
        }

        kernels::layer_norm_forward(x, d, ps.get(self.ln2_g).data(), ps.get(self.ln2_b).data(), &mut h);
        let mut u = vec![F::zero(); n * 4 * d];
        affine(&h, n, d, ps.get(self.fc_w).data(), ps.get(self.fc_b).data(), 4 * d, &mut u);
        u.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        affine(&u, n, 4 * d, ps.get(self.out_w).data(), ps.get(self.out_b).data(), d, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += *b;
        }
    }
}

/// `out = x @ w + b` on raw buffers.
pub(crate) fn affine<F: Float>(x: &[F], n: usize, d_in: usize, w: &[F], b: &[F], d_out: usize, out: &mut [F]) {
    for row in out.chunks_exact_mut(d_out) {
        row.copy_from_slice(b);
    }
    kernels::gemm(n, d_in, d_out, x, false, w, false, out, true);
}

/// Keys and values of one sequence for one layer.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<F> {
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub len: usize,
}

/// Fails with the layer index when an activation is not finite.
pub fn check_finite<F: Float>(values: &[F], layer: usize) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        bail!(Numerical, "non-finite activation {} at layer {layer}, element {i}", values[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::gradcheck::check_gradients;

    fn randomize(ps: &mut ParamSet<f64>, rng: &mut crate::rng::Rng) {
        for id in ps.ids().collect::<Vec<_>>() {
            let shape = ps.get(id).shape().to_vec();
            let noise: Tensor<f64> = init_normal(&shape, 0.3, rng);
            let t = ps.get_mut(id);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += *n;
            }
        }
    }

    fn input(rng: &mut crate::rng::Rng, rows: usize, d: usize) -> Tensor<f64> {
        init_normal(&[rows, d], 1.0, rng)
    }

    #[test]
    fn silent_branches_leave_the_residual_stream_alone() {
        let mut rng = stream(1, "block");
        let mut ps = ParamSet::<f64>::new();
        let blk = Block::new(&mut ps, "b0", 8, 2, &mut rng);
        for id in [blk.proj_w, blk.proj_b, blk.out_w, blk.out_b] {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let x = input(&mut rng, 3, 8);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = blk.forward(&mut g, &ps, xn, 1, 3, &AttnMask::Causal);
        assert_eq!(g.value(y).data(), x.data());

        // With a unit-gain final norm on top, the stack emits LN(x).
        let (one, zero) = (g.constant(ones(8)), g.constant(Tensor::zeros(&[8])));
        let z = g.layer_norm(y, one, zero);
        let mut expect = vec![0.0; 24];
        kernels::layer_norm_forward(x.data(), 8, &[1.0; 8], &[0.0; 8], &mut expect);
        assert_eq!(g.value(z).data(), &expect[..]);
    }

    #[test]
    fn stacked_blocks_compose() {
        let mut rng = stream(2, "block");
        let mut ps = ParamSet::<f64>::new();
        let b1 = Block::new(&mut ps, "b0", 8, 2, &mut rng);
        let b2 = Block::new(&mut ps, "b1", 8, 2, &mut rng);
        randomize(&mut ps, &mut rng);
        let x = input(&mut rng, 4, 8);

        let mut g = Graph::new();
        let n = g.constant(x.clone());
        let h = b1.forward(&mut g, &ps, n, 1, 4, &AttnMask::Causal);
        let both = b2.forward(&mut g, &ps, h, 1, 4, &AttnMask::Causal);

        let mut g1 = Graph::new();
        let n = g1.constant(x);
        let h1 = b1.forward(&mut g1, &ps, n, 1, 4, &AttnMask::Causal);
        let mid = g1.value(h1).clone();
        let mut g2 = Graph::new();
        let n = g2.constant(mid);
        let out = b2.forward(&mut g2, &ps, n, 1, 4, &AttnMask::Causal);
        assert_eq!(g.value(both).data(), g2.value(out).data());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = stream(3, "block");
        let mut ps = ParamSet::<f64>::new();
        let blk = Block::new(&mut ps, "b0", 8, 2, &mut rng);
        randomize(&mut ps, &mut rng);
        let x = input(&mut rng, 2 * 3, 8);
        let w: Vec<f64> = init_normal::<f64, _>(&[48], 1.0, &mut rng).into_data();
        let loss = |p: &ParamSet<f64>, g: &mut Graph<f64>| {
            let n = g.constant(x.clone());
            let y = blk.forward(g, p, n, 2, 3, &AttnMask::Causal);
            let y = g.tanh(y);
            Ok(g.weighted_sum(y, &w))
        };
        let report = check_gradients(&ps, loss, 300, 1e-5, &mut rng).unwrap();
        assert_eq!(report.checked, 300);
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn cached_inference_matches_the_tape() {
        let mut rng = stream(4, "block");
        let mut ps = ParamSet::<f64>::new();
        let blk = Block::new(&mut ps, "b0", 8, 2, &mut rng);
        randomize(&mut ps, &mut rng);
        let x = input(&mut rng, 5, 8);
        let mut g = Graph::new();
        let n = g.constant(x.clone());
        let y = blk.forward(&mut g, &ps, n, 1, 5, &AttnMask::Causal);
        let full = g.value(y).data().to_vec();

        // Prefix of three rows, then two single-row steps.
        let mut cache = LayerCache::default();
        let mut got = Vec::new();
        for rows in [0..3, 3..4, 4..5] {
            let mut chunk = x.data()[rows.start * 8..rows.end * 8].to_vec();
            let len = rows.len();
            blk.infer(&ps, &mut chunk, std::slice::from_ref(&(0..len)), &mut [&mut cache]);
            got.extend(chunk);
        }
        assert_eq!(cache.len, 5);
        for (a, b) in got.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let err = check_finite(&[0.0f32, f32::NAN], 3).unwrap_err();
        assert!(err.to_string().contains("layer 3"), "{err}");
        assert_eq!(err.exit_code(), 3);
        assert!(check_finite(&[1.0f64, 2.0], 0).is_ok());
    }
}
