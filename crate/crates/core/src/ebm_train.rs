//! Single-image energy model training by persistent contrastive divergence.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{clip_global_norm, AdamConfig, AdamState, EnergyArch, EnergyNetParams, ModelError, Network};
use crate::samplers::{psgla, EnergyFn, SamplerConfig, SamplerError, Start};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};
use crate::warp::{augment, TransformFamily, WarpError};

#[derive(Debug, Error)]
pub enum EbmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: mean positive energy {pos:.4e}, mean negative energy {neg:.4e}")]
    Diverged { step: usize, pos: f64, neg: f64 },
}

pub type Result<T, E = EbmError> = std::result::Result<T, E>;

/// Energies beyond this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbmTrainConfig {
    pub arch: EnergyArch,
    pub steps: usize,
    pub batch_size: usize,
    pub lmc_steps: usize,
    pub lmc_step_size: f64,
    /// Inverse temperature β of the negative chains, which target `exp(−β·E_θ)`.
    pub neg_beta: f64,
    pub alpha_reg: f64,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for EbmTrainConfig {
    fn default() -> Self {
        Self {
            arch: EnergyArch::standard(),
            steps: 5000,
            batch_size: 32,
            lmc_steps: 60,
            lmc_step_size: 0.01,
            neg_beta: 2000.0,
            alpha_reg: 0.1,
            buffer_capacity: 10_000,
            reinit_prob: 0.05,
            clip_norm: 100.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl EbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = self.batch_size >= 1 && self.lmc_steps >= 1 && self.buffer_capacity >= self.batch_size;
        let reals = self.lmc_step_size > 0.0
            && self.neg_beta > 0.0
            && self.neg_beta.is_finite()
            && self.alpha_reg >= 0.0
            && (0.0..=1.0).contains(&self.reinit_prob)
            && self.clip_norm > 0.0;
        if !counts || !reals {
            return Err(EbmError::Config(format!("{self:?}")));
        }
        self.adam.validate()?;
        self.arch.validate()?;
        Ok(())
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            step_size: self.lmc_step_size,
            steps: self.lmc_steps,
            project: true,
            seed,
            ..SamplerConfig::default()
        }
    }
}

/// Persistent negatives, each an image in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<S: Scalar = f32> {
    capacity: usize,
    reinit_prob: f64,
    image_shape: Vec<usize>,
    samples: Vec<Tensor<S>>,
}

impl<S: Scalar> ReplayBuffer<S> {
    pub fn new(capacity: usize, reinit_prob: f64, image_shape: &[usize]) -> Self {
        Self {
            capacity,
            reinit_prob,
            image_shape: image_shape.to_vec(),
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> &[Tensor<S>] {
        &self.samples
    }

    fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<S> {
        let n = self.image_shape.iter().product();
        Tensor::new(&self.image_shape, (0..n).map(|_| S::from_f64(rng.gen::<f64>())).collect()).expect("shape matches")
    }

    /// Fills the buffer with uniform noise up to capacity.
    pub fn ensure_initialized<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        while self.samples.len() < self.capacity {
            let s = self.uniform(rng);
            self.samples.push(s);
        }
    }

    /// Picks `count` slots; each starts from its stored sample, or from fresh
    /// noise with probability ρ.
    pub fn draw<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> (Vec<usize>, Tensor<S>) {
        self.ensure_initialized(rng);
        let mut slots = Vec::with_capacity(count);
        let mut starts = Vec::with_capacity(count);
        for _ in 0..count {
            let slot = rng.gen_range(0..self.samples.len());
            let fresh = rng.gen::<f64>() < self.reinit_prob;
            starts.push(if fresh { self.uniform(rng) } else { self.samples[slot].clone() });
            slots.push(slot);
        }
        (slots, Tensor::stack(&starts).expect("uniform shapes"))
    }

    /// Writes evolved samples back, clamped into the box.
    pub fn store(&mut self, slots: &[usize], states: &Tensor<S>) -> Result<()> {
        for (i, &slot) in slots.iter().enumerate() {
            let s = states.index_row(i)?.clamp(S::zero(), S::one());
            self.samples[slot] = s;
        }
        Ok(())
    }
}

/// `β·E_θ` of a frozen network as a sampler target.
pub struct FrozenEnergy<'a, S: Scalar> {
    net: &'a EnergyNetParams<S>,
    beta: f64,
}

impl<'a, S: Scalar> FrozenEnergy<'a, S> {
    pub fn new(net: &'a EnergyNetParams<S>, beta: f64) -> Self {
        Self { net, beta }
    }
}

impl<S: Scalar> EnergyFn<S> for FrozenEnergy<'_, S> {
    fn value(&self, x: &Tensor<S>) -> Result<f64, SamplerError> {
        Ok(self.beta * self.net.energy(x)?.data().iter().map(|&v| v.to_f64()).sum::<f64>())
    }

    fn grad(&self, x: &Tensor<S>) -> Result<Tensor<S>, SamplerError> {
        Ok(self.value_and_grad(x)?.1)
    }

    fn value_and_grad(&self, x: &Tensor<S>) -> Result<(f64, Tensor<S>), SamplerError> {
        let (e, g) = self.net.energy_and_input_grad(x)?;
        let value = self.beta * e.data().iter().map(|&v| v.to_f64()).sum::<f64>();
        Ok((value, g.scale(S::from_f64(self.beta))))
    }
}

/// Evolves buffer-initialized chains under `E_θ` with PSGLA and writes them back.
pub fn draw_negatives<S: Scalar, R: Rng + ?Sized>(
    net: &EnergyNetParams<S>,
    buffer: &mut ReplayBuffer<S>,
    cfg: &EbmTrainConfig,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let (slots, start) = buffer.draw(cfg.batch_size, rng);
    let sampler = cfg.sampler(rng.gen());
    let out = psgla(&FrozenEnergy::new(net, cfg.neg_beta), &sampler, Start::At(&start), 0)?;
    buffer.store(&slots, &out.state)?;
    Ok(out.state)
}

/// Parameter gradients of the contrastive loss, split into its two parts.
#[derive(Debug, Clone)]
pub struct CdGradient<S: Scalar> {
    /// `∇θ mean E(x⁺) − ∇θ mean E(x⁻)`.
    pub contrastive: Vec<Tensor<S>>,
    /// `∇θ (mean E(x⁺)² + mean E(x⁻)²)`, before weighting by α.
    pub regularizer: Vec<Tensor<S>>,
    /// `contrastive + α·regularizer`.
    pub total: Vec<Tensor<S>>,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub loss: f64,
}

/// `(mean E, mean E², ∇θ mean E, ∇θ mean E²)` over one batch.
fn moments<S: Scalar>(net: &EnergyNetParams<S>, batch: &Tensor<S>) -> Result<(f64, f64, Vec<Tensor<S>>, Vec<Tensor<S>>)> {
    net.check_batch(batch)?;
    let n = batch.rows();
    if n == 0 {
        return Err(EbmError::Config("empty batch".into()));
    }
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let x = g.constant(batch.clone());
    let e = net.forward(&mut g, x, &p)?;
    let ev = g.value(e).clone();
    let inv = S::one() / S::from_usize(n);
    let mut mean_grads = g.backward_with_seed(e, Tensor::full(&[n], inv))?;
    let two = S::from_f64(2.0);
    let mut sq_grads = g.backward_with_seed(e, ev.map(|v| two * v * inv))?;
    let take = |gr: &mut crate::tensor::Gradients<S>| -> Vec<Tensor<S>> {
        p.iter().map(|&v| gr.take(v).expect("trainable parameter")).collect()
    };
    let mean = ev.data().iter().map(|&v| v.to_f64()).sum::<f64>() / n as f64;
    let mean_sq = ev.data().iter().map(|&v| v.to_f64().powi(2)).sum::<f64>() / n as f64;
    Ok((mean, mean_sq, take(&mut mean_grads), take(&mut sq_grads)))
}

pub fn cd_gradient<S: Scalar>(
    net: &EnergyNetParams<S>,
    pos: &Tensor<S>,
    neg: &Tensor<S>,
    alpha_reg: f64,
) -> Result<CdGradient<S>> {
    let (pos_energy, pos_sq, gp, rp) = moments(net, pos)?;
    let (neg_energy, neg_sq, gn, rn) = moments(net, neg)?;
    if !(pos_energy.is_finite() && neg_energy.is_finite()) {
        return Err(EbmError::Tensor(TensorError::NonFinite { op: "energy" }));
    }
    let alpha = S::from_f64(alpha_reg);
    let mut contrastive = Vec::with_capacity(gp.len());
    let mut regularizer = Vec::with_capacity(gp.len());
    let mut total = Vec::with_capacity(gp.len());
    for (((a, b), c), d) in gp.iter().zip(&gn).zip(&rp).zip(&rn) {
        let cd = a.sub(b)?;
        let reg = c.add(d)?;
        let mut t = cd.clone();
        t.axpy(alpha, &reg)?;
        contrastive.push(cd);
        regularizer.push(reg);
        total.push(t);
    }
    Ok(CdGradient {
        contrastive,
        regularizer,
        total,
        pos_energy,
        neg_energy,
        loss: pos_energy - neg_energy + alpha_reg * (pos_sq + neg_sq),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbmStep {
    pub step: usize,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

impl EbmStep {
    /// `mean E(neg) − mean E(pos)`; positive once the model discriminates.
    pub fn gap(&self) -> f64 {
        self.neg_energy - self.pos_energy
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EbmTrainLog {
    pub steps: Vec<EbmStep>,
}

impl EbmTrainLog {
    /// Fraction of the last `⌈fraction·steps⌉` steps with a positive gap.
    pub fn tail_positive_gap_rate(&self, fraction: f64) -> f64 {
        let k = ((self.steps.len() as f64 * fraction).ceil() as usize).max(1).min(self.steps.len());
        if k == 0 {
            return 0.0;
        }
        let tail = &self.steps[self.steps.len() - k..];
        tail.iter().filter(|s| s.gap() > 0.0).count() as f64 / k as f64
    }

    /// `step,pos_energy,neg_energy` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,pos_energy,neg_energy")?;
        for s in &self.steps {
            writeln!(w, "{},{},{}", s.step, s.pos_energy, s.neg_energy)?;
        }
        Ok(())
    }
}

/// Trains `E(·; x_ori)` on a fresh stream of transformed copies of `x_ori`.
pub fn train_single_image_ebm(
    x_ori: &Tensor<f32>,
    family: &TransformFamily,
    cfg: &EbmTrainConfig,
) -> Result<(EnergyNetParams<f32>, EbmTrainLog)> {
    train_single_image_ebm_with(x_ori, family, cfg, &mut |_| {})
}

/// As [`train_single_image_ebm`], reporting every step to `observer`.
pub fn train_single_image_ebm_with(
    x_ori: &Tensor<f32>,
    family: &TransformFamily,
    cfg: &EbmTrainConfig,
    observer: &mut dyn FnMut(&EbmStep),
) -> Result<(EnergyNetParams<f32>, EbmTrainLog)> {
    cfg.validate()?;
    if !x_ori.all_within(0.0, 1.0) {
        return Err(WarpError::OutOfRange.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = EnergyNetParams::init(cfg.arch, &mut rng)?;
    let shape = net.input_shape();
    if x_ori.shape() != shape {
        return Err(ModelError::InputShape {
            expected: shape.to_vec(),
            got: x_ori.shape().to_vec(),
        }
        .into());
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.reinit_prob, &shape);
    let mut adam = AdamState::new(net.params());
    let mut log = EbmTrainLog::default();
    for step in 0..cfg.steps {
        let pos = augment(x_ori, cfg.batch_size, family, &mut rng)?;
        let neg = draw_negatives(&net, &mut buffer, cfg, &mut rng)?;
        let cd = cd_gradient(&net, &pos, &neg, cfg.alpha_reg)?;
        if cd.pos_energy.abs() > DIVERGENCE_LIMIT || cd.neg_energy.abs() > DIVERGENCE_LIMIT {
            return Err(EbmError::Diverged {
                step,
                pos: cd.pos_energy,
                neg: cd.neg_energy,
            });
        }
        let mut grads = cd.total;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(net.params_mut(), &grads, &cfg.adam)?;
        let rec = EbmStep {
            step,
            pos_energy: cd.pos_energy,
            neg_energy: cd.neg_energy,
            loss: cd.loss,
            grad_norm,
        };
        observer(&rec);
        log.steps.push(rec);
    }
    Ok((net, log))
}

/// Mean energy over a batch.
pub fn mean_energy(net: &EnergyNetParams<f32>, batch: &Tensor<f32>) -> Result<f64> {
    let e = net.energy(batch)?;
    Ok(e.data().iter().map(|&v| v as f64).sum::<f64>() / e.len().max(1) as f64)
}
