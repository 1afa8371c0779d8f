//! Langevin samplers over differentiable energies, the victim objectives, and
//! the product-of-experts adversarial energy.

mod adv;
mod langevin;
mod objectives;

pub use adv::{AdvEnergy, AdvEnergySpec, DistanceKind};
pub use langevin::{chain_rngs, lmc, psgla, run_sampler, ChainOutput, InitLaw, SamplerConfig, Start};
pub use objectives::{f_ce, f_cw, f_je, f_pe, Objective};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::models::ModelError;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("semantic distance requires a trained energy network")]
    MissingEbm,
    #[error("state shaped {got:?} does not match {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// A differentiable scalar function of a state.
///
/// States are batches whose leading axis indexes independent chains; the value
/// is the sum of per-chain energies, so the gradient of each row is that
/// chain's own gradient.
pub trait EnergyFn<S: Scalar = f32>: Send + Sync {
    fn value(&self, x: &Tensor<S>) -> Result<f64>;
    fn grad(&self, x: &Tensor<S>) -> Result<Tensor<S>>;

    fn value_and_grad(&self, x: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
        Ok((self.value(x)?, self.grad(x)?))
    }
}

/// An energy given by a pair of closures.
pub struct FnEnergy<V, G> {
    value: V,
    grad: G,
}

impl<V, G> FnEnergy<V, G> {
    pub fn new(value: V, grad: G) -> Self {
        Self { value, grad }
    }
}

impl<S, V, G> EnergyFn<S> for FnEnergy<V, G>
where
    S: Scalar,
    V: Fn(&Tensor<S>) -> f64 + Send + Sync,
    G: Fn(&Tensor<S>) -> Tensor<S> + Send + Sync,
{
    fn value(&self, x: &Tensor<S>) -> Result<f64> {
        Ok((self.value)(x))
    }

    fn grad(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok((self.grad)(x))
    }
}

/// Elementwise energy `Σᵢ φ(xᵢ)` with derivative `φ'`.
pub fn separable<S: Scalar>(
    phi: impl Fn(f64) -> f64 + Send + Sync,
    dphi: impl Fn(f64) -> f64 + Send + Sync,
) -> impl EnergyFn<S> {
    FnEnergy::new(
        move |x: &Tensor<S>| x.data().iter().map(|&v| phi(v.to_f64())).sum(),
        move |x: &Tensor<S>| x.map(|v| S::from_f64(dphi(v.to_f64()))),
    )
}

/// Worst relative disagreement between `∇g·v` and the central difference
/// `(g(x+hv) − g(x−hv)) / 2h` over `probes` random unit directions.
pub fn probe_gradient<S: Scalar, R: Rng + ?Sized>(
    energy: &dyn EnergyFn<S>,
    x: &Tensor<S>,
    probes: usize,
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let grad = energy.grad(x)?;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let v: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let dir = Tensor::new(x.shape(), v.iter().map(|a| S::from_f64(a / norm)).collect())?;
        let analytic: f64 = grad.data().iter().zip(dir.data()).map(|(&g, &d)| g.to_f64() * d.to_f64()).sum();
        let mut plus = x.clone();
        plus.axpy(S::from_f64(h), &dir)?;
        let mut minus = x.clone();
        minus.axpy(S::from_f64(-h), &dir)?;
        let numeric = (energy.value(&plus)? - energy.value(&minus)?) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
