use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EnergyFn, Result, SamplerError};
use crate::tensor::{Scalar, Tensor};

/// Where chains start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitLaw {
    /// Independent `U[0, 1]` per coordinate.
    #[default]
    UniformBox,
    /// Every chain starts at a given point (for attacks, `x_ori`).
    FixedPoint,
    /// Chains start from caller-supplied states (a replay buffer).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// ε in `x ← x − (ε²/2)∇g(x) + ε z`.
    pub step_size: f64,
    pub steps: usize,
    pub init: InitLaw,
    /// Clamp every state to `[0, 1]` (PSGLA).
    pub project: bool,
    pub seed: u64,
    /// Keep every `thin`-th state in the returned trace; 0 keeps none.
    pub thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            steps: 2000,
            init: InitLaw::UniformBox,
            project: true,
            seed: 0,
            thin: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(SamplerError::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// Initial states, one leading-axis row per chain.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a, S: Scalar> {
    /// Draw `U[0, 1]` states of this shape from each chain's own stream.
    Uniform(&'a [usize]),
    /// Start from these states.
    At(&'a Tensor<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput<S: Scalar> {
    pub state: Tensor<S>,
    /// `(step, state)` for every `thin`-th step.
    pub trace: Vec<(usize, Tensor<S>)>,
}

/// One independent stream per chain: global chain `i` uses stream `i` of the seed.
pub fn chain_rngs(seed: u64, first_chain: u64, count: usize) -> Vec<ChaCha8Rng> {
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(first_chain + i);
            rng
        })
        .collect()
}

/// Unadjusted Langevin dynamics without projection.
pub fn lmc<S: Scalar>(
    energy: &dyn EnergyFn<S>,
    cfg: &SamplerConfig,
    start: Start<'_, S>,
    first_chain: u64,
) -> Result<ChainOutput<S>> {
    sample(energy, cfg, start, first_chain, false, &mut |_, _| {})
}

/// Langevin step followed by a coordinatewise clamp to `[0, 1]`.
pub fn psgla<S: Scalar>(
    energy: &dyn EnergyFn<S>,
    cfg: &SamplerConfig,
    start: Start<'_, S>,
    first_chain: u64,
) -> Result<ChainOutput<S>> {
    sample(energy, cfg, start, first_chain, true, &mut |_, _| {})
}

/// Runs [`lmc`] or [`psgla`] per `cfg.project`, calling `observer(step, state)`
/// after every step.
pub fn run_sampler<S: Scalar>(
    energy: &dyn EnergyFn<S>,
    cfg: &SamplerConfig,
    start: Start<'_, S>,
    first_chain: u64,
    observer: &mut dyn FnMut(usize, &Tensor<S>),
) -> Result<ChainOutput<S>> {
    sample(energy, cfg, start, first_chain, cfg.project, observer)
}

fn sample<S: Scalar>(
    energy: &dyn EnergyFn<S>,
    cfg: &SamplerConfig,
    start: Start<'_, S>,
    first_chain: u64,
    project: bool,
    observer: &mut dyn FnMut(usize, &Tensor<S>),
) -> Result<ChainOutput<S>> {
    cfg.validate()?;
    let shape = match start {
        Start::Uniform(shape) => shape.to_vec(),
        Start::At(x) => x.shape().to_vec(),
    };
    if shape.is_empty() {
        return Err(SamplerError::Config("states need a leading chain axis".into()));
    }
    let chains = shape[0];
    let mut rngs = chain_rngs(cfg.seed, first_chain, chains);
    let mut x = match start {
        Start::At(x) => x.clone(),
        Start::Uniform(_) => {
            let mut x = Tensor::zeros(&shape);
            for (i, rng) in rngs.iter_mut().enumerate() {
                x.row_mut(i).iter_mut().for_each(|v| *v = S::from_f64(rng.gen::<f64>()));
            }
            x
        }
    };
    if project {
        x = x.clamp(S::zero(), S::one());
    }
    let eps = cfg.step_size;
    let drift = S::from_f64(-0.5 * eps * eps);
    let mut trace = Vec::new();
    for step in 0..cfg.steps {
        let (value, grad) = energy.value_and_grad(&x)?;
        if !value.is_finite() {
            return Err(SamplerError::NonFinite { step, what: "energy" });
        }
        if grad.shape() != x.shape() {
            return Err(SamplerError::Shape {
                expected: x.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(SamplerError::NonFinite { step, what: "gradient" });
        }
        for (i, rng) in rngs.iter_mut().enumerate() {
            for (v, &g) in x.row_mut(i).iter_mut().zip(grad.row(i)) {
                let z: f64 = rng.sample(StandardNormal);
                *v += drift * g + S::from_f64(eps * z);
            }
        }
        if project {
            x.data_mut().iter_mut().for_each(|v| *v = v.max(S::zero()).min(S::one()));
        }
        if !x.all_finite() {
            return Err(SamplerError::NonFinite { step, what: "state" });
        }
        observer(step + 1, &x);
        if cfg.thin > 0 && (step + 1) % cfg.thin == 0 {
            trace.push((step + 1, x.clone()));
        }
    }
    Ok(ChainOutput { state: x, trace })
}
