use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, ModelError, Network, ParamSet, Result};
use crate::tensor::{Conv2dSpec, Graph, Scalar, Tensor, Var};

/// Four strided convolutions with swish, then affine→swish→affine(1).
///
/// Layer geometry is fixed: 5×5/stride 2/pad 4, then three 3×3/stride 2/pad 1.
/// The first layer's padding turns a 28×28 input into an effective 32×32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
}

const LAYERS: [(usize, usize, usize); 4] = [(5, 2, 4), (3, 2, 1), (3, 2, 1), (3, 2, 1)];

impl Default for EnergyArch {
    fn default() -> Self {
        Self::standard()
    }
}

impl EnergyArch {
    /// 64/128/256/256 filters with a 256-unit head.
    pub fn standard() -> Self {
        Self {
            in_channels: 1,
            height: 28,
            width: 28,
            channels: [64, 128, 256, 256],
            hidden: 256,
        }
    }

    /// Same geometry with narrow layers.
    pub fn compact() -> Self {
        Self {
            channels: [8, 16, 32, 32],
            hidden: 64,
            ..Self::standard()
        }
    }

    fn spatial(&self) -> Option<(usize, usize)> {
        let mut hw = (self.height, self.width);
        for (k, s, p) in LAYERS {
            hw = (
                (hw.0 + 2 * p).checked_sub(k)? / s + 1,
                (hw.1 + 2 * p).checked_sub(k)? / s + 1,
            );
        }
        Some(hw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial().is_none() || self.channels.contains(&0) || self.hidden == 0 || self.in_channels == 0 {
            return Err(ModelError::Config(format!("degenerate energy architecture {self:?}")));
        }
        Ok(())
    }

    fn template<S: Scalar>(&self, mut make: impl FnMut(&[usize], usize) -> Tensor<S>) -> ParamSet<S> {
        let mut entries = Vec::new();
        let mut prev = self.in_channels;
        for (i, (&c, (k, _, _))) in self.channels.iter().zip(LAYERS).enumerate() {
            let fan_in = prev * k * k;
            entries.push((format!("conv{}.weight", i + 1), make(&[c, prev, k, k], fan_in)));
            entries.push((format!("conv{}.bias", i + 1), make(&[c], fan_in)));
            prev = c;
        }
        let (h, w) = self.spatial().expect("validated");
        let flat = prev * h * w;
        entries.push(("fc1.weight".into(), make(&[self.hidden, flat], flat)));
        entries.push(("fc1.bias".into(), make(&[self.hidden], flat)));
        entries.push(("fc2.weight".into(), make(&[1, self.hidden], self.hidden)));
        entries.push(("fc2.bias".into(), make(&[1], self.hidden)));
        ParamSet::new(entries)
    }
}

/// Parameters of the energy `E_θ(x)`; lower energy means higher density.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyNetParams<S: Scalar = f32> {
    arch: EnergyArch,
    params: ParamSet<S>,
}

impl<S: Scalar> EnergyNetParams<S> {
    pub fn init<R: Rng + ?Sized>(arch: EnergyArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch.template(|shape, fan_in| uniform_fan_in(shape, fan_in, rng));
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: EnergyArch, params: ParamSet<S>) -> Result<Self> {
        arch.validate()?;
        params.conforms_to(&arch.template(|shape, _| Tensor::zeros(shape)))?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &EnergyArch {
        &self.arch
    }

    pub fn cast<T: Scalar>(&self) -> EnergyNetParams<T> {
        EnergyNetParams {
            arch: self.arch,
            params: self.params.cast(),
        }
    }

    /// One energy per image, shape `[n]`.
    pub fn energy(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let e = self.forward(&mut g, x, &p)?;
        Ok(g.value(e).clone())
    }

    /// Energies `[n]` and `∇ₓ Σᵢ E(xᵢ)`, i.e. each image's own input gradient.
    pub fn energy_and_input_grad(&self, batch: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.input(batch.clone());
        let e = self.forward(&mut g, x, &p)?;
        let total = g.sum(e)?;
        let mut grads = g.backward(total)?;
        let dx = grads.take(x).expect("input is differentiable");
        Ok((g.value(e).clone(), dx))
    }
}

impl<S: Scalar> Network<S> for EnergyNetParams<S> {
    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.arch.in_channels, self.arch.height, self.arch.width]
    }

    /// Returns energies of shape `[n]`.
    fn forward(&self, g: &mut Graph<S>, x: Var, p: &[Var]) -> Result<Var> {
        let mut h = x;
        for (i, (_, stride, pad)) in LAYERS.iter().enumerate() {
            h = g.conv2d(h, p[2 * i], Some(p[2 * i + 1]), Conv2dSpec { stride: *stride, pad: *pad })?;
            h = g.swish(h)?;
        }
        let h = g.flatten(h)?;
        let h = g.affine(h, p[8], Some(p[9]))?;
        let h = g.swish(h)?;
        let e = g.affine(h, p[10], Some(p[11]))?;
        let n = g.value(e).rows();
        Ok(g.reshape(e, &[n])?)
    }
}
