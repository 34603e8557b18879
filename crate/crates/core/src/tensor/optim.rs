use serde::{Deserialize, Serialize};

use super::{Float, ParamSet};
use crate::error::{bail, Result};

/// Adam hyperparameters; a nonzero `weight_decay` gives decoupled AdamW.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers and step counter, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: OptimizerState<F>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        Adam {
            config,
            state: OptimizerState {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
        }
    }

    /// Applies one bias-corrected update using the gradients stored in
    /// `params`. A non-finite gradient rejects the whole update and leaves
    /// both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        if self.state.m.len() != params.len() {
            bail!(
                Shape,
                "optimizer has {} buffers for {} parameters",
                self.state.m.len(),
                params.len()
            );
        }
        for id in params.ids() {
            let t = params.get(id);
            let Some(g) = t.grad() else {
                bail!(Data, "parameter {} has no gradient buffer", params.name(id));
            };
            if g.len() != self.state.m[id.0].len() {
                bail!(Shape, "moment buffer for {} has the wrong length", params.name(id));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                bail!(
                    Numerical,
                    "non-finite gradient {} in {}[{i}]; update rejected",
                    g[i],
                    params.name(id)
                );
            }
        }
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let eps = F::of(c.eps);
        let decay = F::of(c.lr * c.weight_decay);
        for id in params.ids() {
            let (m, v) = (&mut self.state.m[id.0], &mut self.state.v[id.0]);
            let t = params.get_mut(id);
            let g = t.grad().expect("checked above").to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                if c.weight_decay != 0.0 {
                    data[i] -= decay * data[i];
                }
                data[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_f64(&[1], &[value]).unwrap());
        ps
    }

    fn set_grad(ps: &mut ParamSet<f64>, g: f64) {
        let id = ps.id("w").unwrap();
        ps.get_mut(id).grad_mut().unwrap()[0] = g;
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = single(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        for _ in 0..5 {
            set_grad(&mut ps, 0.0);
            opt.step(&mut ps).unwrap();
        }
        assert_eq!(ps.get(ps.id("w").unwrap()).data(), &[0.7]);
        assert_eq!(opt.state.step, 5);
    }

    #[test]
    fn constant_gradient_matches_reference_loop() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (g, k) = (0.3, 7);
        // Textbook Adam written out step by step.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=k {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mhat / (vhat.sqrt() + 1e-8);
        }
        let mut ps = single(1.0);
        let mut opt = Adam::new(cfg, &ps);
        for _ in 0..k {
            set_grad(&mut ps, g);
            opt.step(&mut ps).unwrap();
        }
        let got = ps.get(ps.id("w").unwrap()).data()[0];
        assert!((got - x).abs() < 1e-12, "{got} vs {x}");
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut ps = single(2.0);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        set_grad(&mut ps, f64::NAN);
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("w[0]"));
        assert_eq!(opt.state.step, 0);
        assert_eq!(ps.get(ps.id("w").unwrap()).data(), &[2.0]);
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut ps = single(1.0);
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.1,
                lr: 0.5,
                ..AdamConfig::default()
            },
            &ps,
        );
        set_grad(&mut ps, 0.0);
        opt.step(&mut ps).unwrap();
        assert!((ps.get(ps.id("w").unwrap()).data()[0] - 0.95).abs() < 1e-12);
    }
}
