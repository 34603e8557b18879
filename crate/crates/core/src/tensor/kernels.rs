//! Forward and backward kernels shared by the tape and the cached
//! inference path.

use super::Float;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c (+)= op(a) * op(b)` for row-major buffers.
///
/// `a` is `[m, k]` (stored `[k, m]` when `a_t`), `b` is `[k, n]` (stored
/// `[n, k]` when `b_t`) and `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(m: usize, k: usize, n: usize, a: &[F], a_t: bool, b: &[F], b_t: bool, c: &mut [F], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above bound every index the strides can reach and
    // `c` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise layer norm. Returns per-row `(mean, 1/std)` for the backward pass.
pub fn layer_norm_forward<F: Float>(x: &[F], d: usize, gamma: &[F], beta: &[F], y: &mut [F]) -> Vec<(F, F)> {
    let eps = F::of(LAYER_NORM_EPS);
    let inv_d = F::of(1.0 / d as f64);
    let mut stats = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        stats.push((mean, rstd));
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Float>(
    x: &[F],
    d: usize,
    gamma: &[F],
    stats: &[(F, F)],
    dy: &[F],
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let inv_d = F::of(1.0 / d as f64);
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * gamma[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Float>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x)
}

/// Strided view of one attention head inside a packed buffer:
/// element `(row, col)` lives at `offset + row * stride + col`.
#[derive(Clone, Copy, Debug)]
pub struct HeadView {
    pub offset: usize,
    pub stride: usize,
}

impl HeadView {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.stride + col
    }
}

/// Additive mask entry for query `i`, key `j`: `Some(bias)` to attend,
/// `None` to block.
pub type MaskFn<'a, F> = dyn Fn(usize, usize) -> Option<F> + 'a;

/// Single-head scaled dot-product attention.
///
/// Writes `softmax(q k^T * scale + mask) v` into `out` and the attention
/// probabilities (`n_q x n_k`, row-major) into `probs`. Rows with no
/// attendable key produce zero output.
#[allow(clippy::too_many_arguments)]
pub fn attend_forward<F: Float>(
    q: &[F],
    qv: HeadView,
    k: &[F],
    kv: HeadView,
    v: &[F],
    vv: HeadView,
    n_q: usize,
    n_k: usize,
    dh: usize,
    scale: F,
    mask: &MaskFn<'_, F>,
    out: &mut [F],
    ov: HeadView,
    probs: &mut [F],
) {
    for i in 0..n_q {
        let row = &mut probs[i * n_k..(i + 1) * n_k];
        for (j, p) in row.iter_mut().enumerate() {
            *p = match mask(i, j) {
                Some(bias) => {
                    let mut s = F::zero();
                    for c in 0..dh {
                        s += q[qv.at(i, c)] * k[kv.at(j, c)];
                    }
                    s * scale + bias
                }
                None => F::neg_infinity(),
            };
        }
        super::softmax_in_place(row);
        for c in 0..dh {
            out[ov.at(i, c)] = F::zero();
        }
        for (j, &p) in row.iter().enumerate() {
            if p != F::zero() {
                for c in 0..dh {
                    out[ov.at(i, c)] += p * v[vv.at(j, c)];
                }
            }
        }
    }
}

/// Backward of [`attend_forward`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward<F: Float>(
    q: &[F],
    qv: HeadView,
    k: &[F],
    kv: HeadView,
    v: &[F],
    vv: HeadView,
    n_q: usize,
    n_k: usize,
    dh: usize,
    scale: F,
    probs: &[F],
    dout: &[F],
    ov: HeadView,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let mut dp = vec![F::zero(); n_k];
    for i in 0..n_q {
        let p = &probs[i * n_k..(i + 1) * n_k];
        let mut dot = F::zero();
        for j in 0..n_k {
            if p[j] == F::zero() {
                dp[j] = F::zero();
                continue;
            }
            let mut s = F::zero();
            for c in 0..dh {
                let g = dout[ov.at(i, c)];
                s += g * v[vv.at(j, c)];
                dv[vv.at(j, c)] += p[j] * g;
            }
            dp[j] = s;
            dot += p[j] * s;
        }
        for j in 0..n_k {
            if p[j] == F::zero() {
                continue;
            }
            let ds = p[j] * (dp[j] - dot) * scale;
            for c in 0..dh {
                dq[qv.at(i, c)] += ds * k[kv.at(j, c)];
                dk[kv.at(j, c)] += ds * q[qv.at(i, c)];
            }
        }
    }
}
