use serde::{Deserialize, Serialize};

use super::{Result, SamplerError};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Victim objective `f(g(x), y_tar)`; lower means "more like `y_tar`".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Objective {
    /// `−log σ(g)[t]`.
    Ce,
    /// `max(max_{y≠t} g[y] − g[t], 0)`.
    Cw,
    /// `−c·Σ σ log σ + f_CE`.
    Pe { c: f64 },
    /// `−g[t] + c·logsumexp(g)`.
    Je { c: f64 },
}

impl Default for Objective {
    fn default() -> Self {
        Objective::Cw
    }
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Cw => "cw",
            Objective::Pe { .. } => "pe",
            Objective::Je { .. } => "je",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Pe { c } | Objective::Je { c } if !(c >= 0.0 && c.is_finite()) => {
                Err(SamplerError::Config(format!("objective constant must be finite and ≥ 0, got {c}")))
            }
            _ => Ok(()),
        }
    }

    /// Records the per-row objective for logits `[n, k]`, giving `[n]`.
    pub fn build<S: Scalar>(&self, g: &mut Graph<S>, logits: Var, targets: &[usize]) -> Result<Var> {
        self.validate()?;
        let k = g.value(logits).shape().get(1).copied().unwrap_or(0);
        if let Some(&label) = targets.iter().find(|&&t| t >= k) {
            return Err(SamplerError::Label { label, classes: k });
        }
        Ok(match *self {
            Objective::Ce => g.cross_entropy(logits, targets)?,
            Objective::Cw => {
                let (other, _) = g.max_rows_excluding(logits, targets)?;
                let own = g.select(logits, targets)?;
                let gap = g.sub(other, own)?;
                g.relu(gap)?
            }
            Objective::Pe { c } => {
                let ce = g.cross_entropy(logits, targets)?;
                if c == 0.0 {
                    return Ok(ce);
                }
                let lse = g.logsumexp(logits, 1)?;
                let p = g.softmax(logits, 1)?;
                let pg = g.mul(p, logits)?;
                let expected = g.sum_rows(pg)?;
                let entropy = g.sub(lse, expected)?;
                let weighted = g.scale(entropy, S::from_f64(c))?;
                g.add(weighted, ce)?
            }
            Objective::Je { c } => {
                let own = g.select(logits, targets)?;
                let lse = g.logsumexp(logits, 1)?;
                let weighted = g.scale(lse, S::from_f64(c))?;
                g.sub(weighted, own)?
            }
        })
    }

    /// Per-row values for logits `[n, k]`.
    pub fn eval<S: Scalar>(&self, logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let f = self.build(&mut g, l, targets)?;
        Ok(g.value(f).clone())
    }

    fn eval_one<S: Scalar>(&self, logits: &[S], target: usize) -> Result<S> {
        let t = Tensor::new(&[1, logits.len()], logits.to_vec())?;
        Ok(self.eval(&t, &[target])?.data()[0])
    }
}

pub fn f_ce<S: Scalar>(logits: &[S], y_tar: usize) -> Result<S> {
    Objective::Ce.eval_one(logits, y_tar)
}

pub fn f_cw<S: Scalar>(logits: &[S], y_tar: usize) -> Result<S> {
    Objective::Cw.eval_one(logits, y_tar)
}

pub fn f_pe<S: Scalar>(logits: &[S], y_tar: usize, c_pe: f64) -> Result<S> {
    Objective::Pe { c: c_pe }.eval_one(logits, y_tar)
}

pub fn f_je<S: Scalar>(logits: &[S], y_tar: usize, c_je: f64) -> Result<S> {
    Objective::Je { c: c_je }.eval_one(logits, y_tar)
}
