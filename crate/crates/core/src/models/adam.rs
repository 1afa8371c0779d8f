use serde::{Deserialize, Serialize};

use super::{ModelError, ParamSet, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !betas_ok || !(self.eps > 0.0) {
            return Err(ModelError::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `(1 − β₁ᵗ, 1 − β₂ᵗ)` for the update that follows `step` completed ones.
    pub fn bias_corrections(cfg: &AdamConfig, step: u64) -> (f64, f64) {
        let t = (step + 1) as i32;
        (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
    }

    /// Applies one update in place. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(ModelError::Config(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.entries().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(ModelError::NonFiniteGradient(name.clone()));
            }
        }
        let (bc1, bc2) = Self::bias_corrections(cfg, self.step);
        let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
        let (one, eps) = (S::one(), S::from_f64(cfg.eps));
        let step_size = S::from_f64(cfg.lr / bc1);
        let sqrt_bc2 = S::from_f64(bc2.sqrt());
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, &gi) in gd.iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let denom = vi.sqrt() / sqrt_bc2 + eps;
                pd[i] -= step_size * m.data()[i] / denom;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| Scalar::to_f64(v).powi(2))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let c = S::from_f64(max_norm / total);
        for g in grads.iter_mut() {
            *g = g.scale(c);
        }
    }
    total
}
