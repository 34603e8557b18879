use detox_core::lm::nucleus;
use detox_core::ppo::{ppo_surrogate, update_beta, KlControllerState};
use wasm_bindgen::prelude::*;

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-3);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Next-token distribution before and after the top-p cut, as
/// `[p_0, q_0, p_1, q_1, ...]` where `q` is zero outside the nucleus.
#[wasm_bindgen]
pub fn nucleus_view(logits: Vec<f64>, temperature: f64, top_p: f64) -> Result<Vec<f64>, JsError> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(JsError::new("logits must be finite numbers"));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(JsError::new("top-p must lie in (0, 1]"));
    }
    let p = softmax(&logits, temperature);
    let mut q = vec![0.0; p.len()];
    for (i, w) in nucleus(&p, top_p) {
        q[i] = w;
    }
    Ok(p.into_iter().zip(q).flat_map(|(a, b)| [a, b]).collect())
}

/// Clipped objective against the unclipped `ratio * A` on `points` ratios
/// spread over `[0, max_ratio]`: `[r, clipped, unclipped, ...]`.
#[wasm_bindgen]
pub fn surrogate_curve(advantage: f64, eps: f64, max_ratio: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let points = points.clamp(2, 2000);
    let mut out = Vec::with_capacity(3 * points);
    for k in 0..points {
        let r = max_ratio * k as f64 / (points - 1) as f64;
        let clipped = ppo_surrogate(r, advantage, eps).map_err(|e| JsError::new(&e.to_string()))?;
        out.extend([r, clipped, r * advantage]);
    }
    Ok(out)
}

/// Runs the adaptive KL controller for `steps` batches against a toy policy
/// whose measured KL relaxes toward `free_kl / (1 + pull * beta)`.
/// Returns `[kl, beta, ...]` per step.
#[wasm_bindgen]
pub fn kl_controller_trace(init_beta: f64, kl_target: f64, free_kl: f64, pull: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    if !(init_beta >= 0.0 && kl_target > 0.0 && free_kl >= 0.0 && pull >= 0.0) {
        return Err(JsError::new("beta, free KL and pull must be non-negative and the target positive"));
    }
    let mut state = KlControllerState {
        beta: init_beta,
        kl_target,
        last_kl: None,
    };
    let mut kl = 0.0;
    let mut out = Vec::with_capacity(2 * steps);
    for _ in 0..steps.min(100_000) {
        kl += 0.05 * (free_kl / (1.0 + pull * state.beta) - kl);
        let beta = update_beta(&mut state, kl);
        out.extend([kl, beta]);
    }
    Ok(out)
}
