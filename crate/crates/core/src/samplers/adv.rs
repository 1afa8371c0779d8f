use serde::{Deserialize, Serialize};

use super::{EnergyFn, Objective, Result, SamplerError};
use crate::models::{ClassifierParams, EnergyNetParams, Network};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// `‖x − x_ori‖²`.
    L2sq,
    /// `E(x; x_ori)` from an energy network trained on transforms of `x_ori`.
    #[default]
    Semantic,
}

/// Constants and kinds of `c₁·D(x_ori, x) + c₂·f(g(x), y_tar)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvEnergySpec {
    pub c1: f64,
    pub c2: f64,
    pub distance: DistanceKind,
    pub objective: Objective,
}

impl Default for AdvEnergySpec {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1e-2,
            distance: DistanceKind::Semantic,
            objective: Objective::Cw,
        }
    }
}

impl AdvEnergySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c1.is_finite() && self.c2 >= 0.0 && self.c2.is_finite()) {
            return Err(SamplerError::Config(format!(
                "c1 and c2 must be finite and ≥ 0, got {} and {}",
                self.c1, self.c2
            )));
        }
        self.objective.validate()
    }
}

/// Adversarial energy bound to a victim, a reference image and a target class.
#[derive(Debug, Clone)]
pub struct AdvEnergy<'a, S: Scalar = f32> {
    spec: AdvEnergySpec,
    x_ori: Tensor<S>,
    y_tar: usize,
    victim: &'a ClassifierParams<S>,
    ebm: Option<&'a EnergyNetParams<S>>,
}

/// Summed distance and objective terms, with their input gradients.
struct Parts<S: Scalar> {
    distance: Option<(f64, Tensor<S>)>,
    objective: Option<(f64, Tensor<S>)>,
}

impl<'a, S: Scalar> AdvEnergy<'a, S> {
    pub fn new(
        spec: AdvEnergySpec,
        x_ori: Tensor<S>,
        y_tar: usize,
        victim: &'a ClassifierParams<S>,
        ebm: Option<&'a EnergyNetParams<S>>,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.distance == DistanceKind::Semantic && ebm.is_none() {
            return Err(SamplerError::MissingEbm);
        }
        if y_tar >= victim.classes() {
            return Err(SamplerError::Label {
                label: y_tar,
                classes: victim.classes(),
            });
        }
        let expected = victim.input_shape();
        if x_ori.shape() != expected {
            return Err(SamplerError::Shape {
                expected: expected.to_vec(),
                got: x_ori.shape().to_vec(),
            });
        }
        Ok(Self {
            spec,
            x_ori,
            y_tar,
            victim,
            ebm,
        })
    }

    pub fn spec(&self) -> &AdvEnergySpec {
        &self.spec
    }

    pub fn y_tar(&self) -> usize {
        self.y_tar
    }

    /// Per-row `D(x_ori, xᵢ)`, shape `[n]`.
    fn distance_rows(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        Ok(match self.spec.distance {
            DistanceKind::L2sq => {
                let n = g.value(x).rows();
                let reference = g.constant(self.x_ori.tile_rows(n));
                let d = g.sub(x, reference)?;
                let sq = g.mul(d, d)?;
                g.sum_rows(sq)?
            }
            DistanceKind::Semantic => {
                let ebm = self.ebm.ok_or(SamplerError::MissingEbm)?;
                let p = ebm.params().bind(g, false);
                ebm.forward(g, x, &p)?
            }
        })
    }

    /// Per-row `f(g(xᵢ), y_tar)`, shape `[n]`.
    fn objective_rows(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let p = self.victim.params().bind(g, false);
        let logits = self.victim.forward(g, x, &p)?;
        let targets = vec![self.y_tar; g.value(x).rows()];
        self.spec.objective.build(g, logits, &targets)
    }

    fn term(&self, x: &Tensor<S>, distance: bool) -> Result<(f64, Tensor<S>)> {
        self.victim.check_batch(x)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let rows = if distance {
            self.distance_rows(&mut g, xv)?
        } else {
            self.objective_rows(&mut g, xv)?
        };
        let total = g.sum(rows)?;
        let grad = g.backward(total)?.take(xv).expect("input is differentiable");
        Ok((g.value(total).item()?.to_f64(), grad))
    }

    fn parts(&self, x: &Tensor<S>) -> Result<Parts<S>> {
        Ok(Parts {
            distance: if self.spec.c1 != 0.0 { Some(self.term(x, true)?) } else { None },
            objective: if self.spec.c2 != 0.0 { Some(self.term(x, false)?) } else { None },
        })
    }

    /// `(Σᵢ D, ∇ₓ Σᵢ D)` on its own, regardless of `c₁`.
    pub fn distance_term(&self, x: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
        self.term(x, true)
    }

    /// `(Σᵢ f, ∇ₓ Σᵢ f)` on its own, regardless of `c₂`.
    pub fn objective_term(&self, x: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
        self.term(x, false)
    }

    /// Per-row distances `D(x_ori, xᵢ)`.
    pub fn distances(&self, x: &Tensor<S>) -> Result<Vec<f64>> {
        self.rows(x, true)
    }

    /// Per-row objective values `f(g(xᵢ), y_tar)`.
    pub fn objectives(&self, x: &Tensor<S>) -> Result<Vec<f64>> {
        self.rows(x, false)
    }

    fn rows(&self, x: &Tensor<S>, distance: bool) -> Result<Vec<f64>> {
        self.victim.check_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let v = if distance {
            self.distance_rows(&mut g, xv)?
        } else {
            self.objective_rows(&mut g, xv)?
        };
        Ok(g.value(v).data().iter().map(|&v| v.to_f64()).collect())
    }
}

impl<S: Scalar> EnergyFn<S> for AdvEnergy<'_, S> {
    fn value(&self, x: &Tensor<S>) -> Result<f64> {
        let mut total = 0.0;
        if self.spec.c1 != 0.0 {
            total += self.spec.c1 * self.rows(x, true)?.iter().sum::<f64>();
        }
        if self.spec.c2 != 0.0 {
            total += self.spec.c2 * self.rows(x, false)?.iter().sum::<f64>();
        }
        Ok(total)
    }

    fn grad(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.value_and_grad(x)?.1)
    }

    fn value_and_grad(&self, x: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
        let parts = self.parts(x)?;
        let mut value = 0.0;
        let mut grad = Tensor::zeros(x.shape());
        for (c, part) in [(self.spec.c1, parts.distance), (self.spec.c2, parts.objective)] {
            if let Some((v, g)) = part {
                value += c * v;
                grad.axpy(S::from_f64(c), &g)?;
            }
        }
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierArch, EnergyArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn semantic_distance_needs_ebm() {
        let victim = ClassifierParams::<f32>::zeros(ClassifierArch::compact()).unwrap();
        let err = AdvEnergy::new(AdvEnergySpec::default(), Tensor::zeros(&[1, 28, 28]), 3, &victim, None).unwrap_err();
        assert!(matches!(err, SamplerError::MissingEbm));
    }

    #[test]
    fn value_is_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let victim = ClassifierParams::<f64>::init(ClassifierArch::compact(), &mut rng).unwrap();
        let ebm = EnergyNetParams::<f64>::init(EnergyArch::compact(), &mut rng).unwrap();
        let spec = AdvEnergySpec {
            c1: 0.7,
            c2: 3.0,
            distance: DistanceKind::Semantic,
            objective: Objective::Ce,
        };
        let x_ori = Tensor::full(&[1, 28, 28], 0.25);
        let adv = AdvEnergy::new(spec, x_ori, 4, &victim, Some(&ebm)).unwrap();
        let x = Tensor::full(&[2, 1, 28, 28], 0.5);
        let (v, _) = adv.value_and_grad(&x).unwrap();
        let (d, _) = adv.distance_term(&x).unwrap();
        let (f, _) = adv.objective_term(&x).unwrap();
        assert!((v - (0.7 * d + 3.0 * f)).abs() < 1e-9);
        assert!((adv.value(&x).unwrap() - v).abs() < 1e-9);
    }
}
