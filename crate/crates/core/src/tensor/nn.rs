use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Float, Tensor};
use crate::error::{bail, Result};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<F>) -> ParamId {
        t.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = F::of(max_norm / norm);
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }

    /// Same parameters in another precision, with fresh gradient buffers.
    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.add(n, t.cast());
        }
        out
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        if self.names != other.names {
            bail!(Shape, "parameter sets have different layouts");
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                bail!(Shape, "parameter shape {:?} vs {:?}", dst.shape(), src.shape());
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Replaces the values of a named parameter.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: Vec<F>) -> Result<()> {
        let Some(id) = self.id(name) else {
            bail!(Checkpoint, "unknown parameter {name}");
        };
        let t = &mut self.tensors[id.0];
        if t.shape() != shape || values.len() != t.len() {
            bail!(Checkpoint, "parameter {name}: shape {:?} vs stored {:?}", t.shape(), shape);
        }
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }
}

/// Tensor filled from `N(0, std^2)`.
pub fn init_normal<F: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in t.data_mut() {
            *v = F::of(normal.sample(rng));
        }
    }
    t
}
