use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pgd_attack, AdamConfig, AdamState, ClassifierArch, ClassifierParams, ModelError, Network, PgdConfig, PgdGoal, Result};
use crate::data::Dataset;
use crate::tensor::{Graph, Tensor};
use crate::warp::{sample_transform, TransformFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs over which an adversary's ε and α ramp linearly up from zero.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: 1e-4,
            batch_size: 64,
            epochs: 14,
            beta1: adam.beta1,
            beta2: adam.beta2,
            warmup_epochs: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be at least 1".into()));
        }
        self.adam().validate()
    }
}

/// Optional per-batch input transformations.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Each image is replaced by one independent draw from this family.
    pub augment: Option<TransformFamily>,
    /// Each batch is replaced by its untargeted PGD perturbation.
    pub adversary: Option<PgdConfig>,
}

/// Mean minibatch cross-entropy, one entry per optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Trains a freshly initialized classifier by minibatch Adam on mean cross-entropy.
pub fn train_classifier(
    arch: ClassifierArch,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(ClassifierParams<f32>, TrainLog)> {
    cfg.validate()?;
    if data.classes != arch.classes {
        return Err(ModelError::Config(format!(
            "dataset has {} classes, architecture {}",
            data.classes, arch.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ClassifierParams::init(arch, &mut rng)?;
    net.check_batch(&data.images)?;
    let adam = cfg.adam();
    let mut state = AdamState::new(net.params());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let [_, h, w] = net.input_shape();
    let ramp_steps = cfg.warmup_epochs * data.len().div_ceil(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = data.batch::<f32>(chunk);
            if let Some(family) = &opts.augment {
                for i in 0..x.rows() {
                    let t = sample_transform(family, h, w, &mut rng)?;
                    let img = t.apply(&x.index_row(i)?)?;
                    x.row_mut(i).copy_from_slice(img.data());
                }
            }
            if let Some(pgd) = &opts.adversary {
                let pgd = if log.losses.len() < ramp_steps {
                    let frac = (log.losses.len() + 1) as f64 / ramp_steps as f64;
                    PgdConfig {
                        eps: pgd.eps * frac,
                        alpha: pgd.alpha * frac,
                        ..*pgd
                    }
                } else {
                    *pgd
                };
                x = pgd_attack(&net, &x, PgdGoal::Untargeted(&y), &pgd)?;
            }
            let (loss, grads) = loss_and_grads(&net, &x, &y)?;
            state.step(net.params_mut(), &grads, &adam)?;
            log.losses.push(loss);
        }
    }
    Ok((net, log))
}

/// Adversarial training: the inner maximization is approximated by PGD on every batch.
pub fn adv_train(
    arch: ClassifierArch,
    data: &Dataset,
    cfg: &TrainConfig,
    pgd: &PgdConfig,
) -> Result<(ClassifierParams<f32>, TrainLog)> {
    let opts = TrainOptions {
        augment: None,
        adversary: Some(*pgd),
    };
    train_classifier(arch, data, cfg, &opts)
}

fn loss_and_grads(net: &ClassifierParams<f32>, x: &Tensor<f32>, y: &[usize]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let xv = g.constant(x.clone());
    let logits = net.forward(&mut g, xv, &p)?;
    let ce = g.cross_entropy(logits, y)?;
    let loss = g.mean(ce)?;
    let mut grads = g.backward(loss)?;
    let out = p.iter().map(|&v| grads.take(v).expect("trainable parameter")).collect();
    Ok((g.value(loss).item()? as f64, out))
}

/// Fraction of `data` classified correctly, evaluated in batches.
pub fn accuracy(net: &ClassifierParams<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch::<f32>(chunk);
        correct += net.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
