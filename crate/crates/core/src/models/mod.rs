//! Victim/auxiliary classifiers, the energy network, and their training loops.

mod adam;
mod classifier;
mod energy_net;
mod pgd;
mod train;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use classifier::{ClassifierArch, ClassifierParams};
pub use energy_net::{EnergyArch, EnergyNetParams};
pub use pgd::{pgd_attack, Norm, PgdConfig, PgdGoal};
pub use train::{accuracy, adv_train, train_classifier, TrainConfig, TrainLog, TrainOptions};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};
use crate::warp::WarpError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("expected input shaped {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown norm `{0}` (expected linf or l2)")]
    UnknownNorm(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Ordered named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S: Scalar = f32> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new(entries: Vec<(String, Tensor<S>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Checks names and shapes against a template, in order.
    pub fn conforms_to(&self, template: &ParamSet<S>) -> Result<()> {
        for (i, (name, t)) in template.entries.iter().enumerate() {
            match self.entries.get(i) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some((n, _)) if n != name => {
                    return Err(match self.get(name) {
                        Some(_) => ModelError::UnexpectedParam(n.clone()),
                        None => ModelError::MissingParam(name.clone()),
                    })
                }
                Some((_, v)) if v.shape() != t.shape() => {
                    return Err(ModelError::ParamShape {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: v.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some((extra, _)) = self.entries.get(template.len()) {
            return Err(ModelError::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// A network whose parameters live in a [`ParamSet`].
pub trait Network<S: Scalar>: Send + Sync {
    fn params(&self) -> &ParamSet<S>;
    fn params_mut(&mut self) -> &mut ParamSet<S>;
    /// Per-image input shape `[c, h, w]`.
    fn input_shape(&self) -> [usize; 3];
    /// Forward pass over a batch `x: [n, c, h, w]` given bound parameters.
    fn forward(&self, g: &mut Graph<S>, x: Var, params: &[Var]) -> Result<Var>;

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        let [c, h, w] = self.input_shape();
        match batch.shape() {
            &[_, bc, bh, bw] if (bc, bh, bw) == (c, h, w) => Ok(()),
            s => Err(ModelError::InputShape {
                expected: vec![0, c, h, w],
                got: s.to_vec(),
            }),
        }
    }
}

/// `U(−1/√fan_in, 1/√fan_in)`, the default initialization for conv/affine layers.
pub(crate) fn uniform_fan_in<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}
