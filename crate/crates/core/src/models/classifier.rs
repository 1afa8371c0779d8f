use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, ModelError, Network, ParamSet, Result};
use crate::tensor::{Conv2dSpec, Graph, Scalar, Tensor, Var};

/// conv(k5, same)→relu→maxpool2→conv(k5, same)→relu→maxpool2→affine→relu→affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub classes: usize,
}

const KERNEL: usize = 5;

impl Default for ClassifierArch {
    fn default() -> Self {
        Self::madry()
    }
}

impl ClassifierArch {
    /// 32/64 filters, 1024 hidden units, 10 classes on 28×28 grayscale.
    pub fn madry() -> Self {
        Self {
            in_channels: 1,
            height: 28,
            width: 28,
            conv1: 32,
            conv2: 64,
            hidden: 1024,
            classes: 10,
        }
    }

    /// Same topology with far fewer units, for quick runs.
    pub fn compact() -> Self {
        Self {
            conv1: 8,
            conv2: 16,
            hidden: 64,
            ..Self::madry()
        }
    }

    fn pooled(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let (ph, pw) = self.pooled();
        if self.classes < 2 || ph == 0 || pw == 0 || self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 {
            return Err(ModelError::Config(format!("degenerate classifier architecture {self:?}")));
        }
        Ok(())
    }

    fn template<S: Scalar>(&self, mut make: impl FnMut(&[usize], usize) -> Tensor<S>) -> ParamSet<S> {
        let (ph, pw) = self.pooled();
        let flat = self.conv2 * ph * pw;
        let k2 = KERNEL * KERNEL;
        ParamSet::new(vec![
            ("conv1.weight".into(), make(&[self.conv1, self.in_channels, KERNEL, KERNEL], self.in_channels * k2)),
            ("conv1.bias".into(), make(&[self.conv1], self.in_channels * k2)),
            ("conv2.weight".into(), make(&[self.conv2, self.conv1, KERNEL, KERNEL], self.conv1 * k2)),
            ("conv2.bias".into(), make(&[self.conv2], self.conv1 * k2)),
            ("fc1.weight".into(), make(&[self.hidden, flat], flat)),
            ("fc1.bias".into(), make(&[self.hidden], flat)),
            ("fc2.weight".into(), make(&[self.classes, self.hidden], self.hidden)),
            ("fc2.bias".into(), make(&[self.classes], self.hidden)),
        ])
    }
}

/// Parameters `g_φ` of a small CNN producing `|Y|` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<S: Scalar = f32> {
    arch: ClassifierArch,
    params: ParamSet<S>,
}

impl<S: Scalar> ClassifierParams<S> {
    pub fn init<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch.template(|shape, fan_in| uniform_fan_in(shape, fan_in, rng));
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: ClassifierArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: arch.template(|shape, _| Tensor::zeros(shape)),
        })
    }

    /// Wraps loaded parameters, failing on the first name/shape mismatch.
    pub fn from_params(arch: ClassifierArch, params: ParamSet<S>) -> Result<Self> {
        arch.validate()?;
        params.conforms_to(&arch.template(|shape, _| Tensor::zeros(shape)))?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn cast<T: Scalar>(&self) -> ClassifierParams<T> {
        ClassifierParams {
            arch: self.arch,
            params: self.params.cast(),
        }
    }

    /// Logits `[n, |Y|]` for a batch `[n, c, h, w]`.
    pub fn classify(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, x, &p)?;
        Ok(g.value(y).clone())
    }

    /// Row-wise softmax of [`classify`](Self::classify).
    pub fn probabilities(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let logits = g.constant(self.classify(batch)?);
        let p = g.softmax(logits, 1)?;
        Ok(g.value(p).clone())
    }

    pub fn predict(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.classify(batch)?.argmax_rows())
    }
}

impl<S: Scalar> Network<S> for ClassifierParams<S> {
    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.arch.in_channels, self.arch.height, self.arch.width]
    }

    fn forward(&self, g: &mut Graph<S>, x: Var, p: &[Var]) -> Result<Var> {
        let same = Conv2dSpec {
            stride: 1,
            pad: KERNEL / 2,
        };
        let h = g.conv2d(x, p[0], Some(p[1]), same)?;
        let h = g.relu(h)?;
        let h = g.max_pool2d(h, 2, 2)?;
        let h = g.conv2d(h, p[2], Some(p[3]), same)?;
        let h = g.relu(h)?;
        let h = g.max_pool2d(h, 2, 2)?;
        let h = g.flatten(h)?;
        let h = g.affine(h, p[4], Some(p[5]))?;
        let h = g.relu(h)?;
        Ok(g.affine(h, p[6], Some(p[7]))?)
    }
}
