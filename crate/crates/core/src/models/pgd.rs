use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ClassifierParams, ModelError, Network, Result};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl FromStr for Norm {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            _ => Err(ModelError::UnknownNorm(s.to_string())),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub norm: Norm,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl Default for PgdConfig {
    /// ε = 0.3, α = 0.036, 10 steps under L∞.
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 0.3,
            alpha: 0.036,
            steps: 10,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite() && self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Config(format!("PGD needs finite ε, α ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Which way each row moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdGoal<'a> {
    /// Ascend the cross-entropy at the true labels.
    Untargeted(&'a [usize]),
    /// Descend the cross-entropy at the target labels.
    Targeted(&'a [usize]),
}

/// Projected gradient attack on a batch `[n, c, h, w]` without random start.
pub fn pgd_attack<S: Scalar>(
    net: &ClassifierParams<S>,
    x: &Tensor<S>,
    goal: PgdGoal<'_>,
    cfg: &PgdConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    net.check_batch(x)?;
    let (labels, sign) = match goal {
        PgdGoal::Untargeted(l) => (l, S::one()),
        PgdGoal::Targeted(l) => (l, -S::one()),
    };
    if labels.len() != x.rows() {
        return Err(ModelError::Config(format!("{} labels for {} images", labels.len(), x.rows())));
    }
    let (zero, one) = (S::zero(), S::one());
    let eps = S::from_f64(cfg.eps);
    let alpha = S::from_f64(cfg.alpha);
    let mut adv = x.clone();
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let xv = g.input(adv.clone());
        let logits = net.forward(&mut g, xv, &p)?;
        let ce = g.cross_entropy(logits, labels)?;
        let total = g.sum(ce)?;
        let grad = g.backward(total)?.take(xv).expect("input is differentiable");
        match cfg.norm {
            Norm::Linf => {
                for ((a, &o), &d) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
                    let step = if d > zero {
                        alpha
                    } else if d < zero {
                        -alpha
                    } else {
                        zero
                    };
                    *a = (*a + sign * step).max(o - eps).min(o + eps).max(zero).min(one);
                }
            }
            Norm::L2 => {
                for i in 0..adv.rows() {
                    let gi = grad.row(i);
                    let gn = gi.iter().map(|&v| v * v).sum::<S>().sqrt();
                    let scale = if gn > zero { sign * alpha / gn } else { zero };
                    let orig = x.row(i);
                    let row = adv.row_mut(i);
                    let mut delta: Vec<S> = row.iter().zip(orig).zip(gi).map(|((&a, &o), &d)| a + scale * d - o).collect();
                    let dn = delta.iter().map(|&v| v * v).sum::<S>().sqrt();
                    if dn > eps {
                        let c = eps / dn;
                        delta.iter_mut().for_each(|v| *v *= c);
                    }
                    for ((a, &o), &d) in row.iter_mut().zip(orig).zip(&delta) {
                        *a = (o + d).max(zero).min(one);
                    }
                }
            }
        }
    }
    debug_assert!(within_budget(x, &adv, cfg), "PGD output left the ε-ball or the [0,1] box");
    Ok(adv)
}

fn within_budget<S: Scalar>(x: &Tensor<S>, adv: &Tensor<S>, cfg: &PgdConfig) -> bool {
    if !adv.all_within(S::zero(), S::one()) {
        return false;
    }
    (0..x.rows()).all(|i| {
        let d = x.row(i).iter().zip(adv.row(i)).map(|(&a, &b)| (b - a).to_f64());
        let n = match cfg.norm {
            Norm::Linf => d.fold(0.0f64, |m, v| m.max(v.abs())),
            Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
        };
        n <= cfg.eps + 1e-5
    })
}
