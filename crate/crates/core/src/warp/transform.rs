use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tps::ControlGrid;
use super::{image_dims, resample, Fill, TpsParams, WarpError};
use crate::tensor::{Scalar, Tensor};

/// One member of a transformation family together with its sampling range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformKind {
    Identity,
    /// Control-point jitter standard deviation in pixels.
    Tps { sigma: f64 },
    Scale { min: f64, max: f64 },
    Rotate { max_degrees: f64 },
    /// Random crop of up to `max_pixels` per side, re-padded to full size.
    Crop { max_pixels: usize },
    Brightness { max_delta: f64 },
    /// Hue rotation in turns (1.0 = 360°); only acts on 3-channel images.
    Hue { max_shift: f64 },
}

impl TransformKind {
    fn validate(&self) -> Result<(), WarpError> {
        let bad = |m: &str| Err(WarpError::Parameter(m.to_string()));
        match *self {
            Self::Tps { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => bad("tps sigma must be >= 0"),
            Self::Scale { min, max } if !(min > 0.0 && min <= max && max.is_finite()) => {
                bad("scale range must satisfy 0 < min <= max")
            }
            Self::Rotate { max_degrees } if !(max_degrees >= 0.0 && max_degrees.is_finite()) => {
                bad("rotation range must be >= 0")
            }
            Self::Brightness { max_delta } if !(0.0..=1.0).contains(&max_delta) => bad("brightness delta must lie in [0, 1]"),
            Self::Hue { max_shift } if !(0.0..=0.5).contains(&max_shift) => bad("hue shift must lie in [0, 0.5]"),
            _ => Ok(()),
        }
    }
}

/// The distribution 𝒯 of semantics-preserving transformations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformFamily {
    pub members: Vec<TransformKind>,
    pub fill: Fill,
    /// Spline regularization used when fitting jittered grids.
    pub tps_lambda: f64,
}

impl Default for TransformFamily {
    fn default() -> Self {
        Self::mnist()
    }
}

impl TransformFamily {
    pub fn identity() -> Self {
        Self {
            members: vec![TransformKind::Identity],
            fill: Fill::Zero,
            tps_lambda: 0.0,
        }
    }

    /// Digits: TPS (σ = 2 px), scaling in [0.85, 1.15], rotation ±15°, crop ≤ 2 px.
    pub fn mnist() -> Self {
        Self {
            members: vec![
                TransformKind::Tps { sigma: 2.0 },
                TransformKind::Scale { min: 0.85, max: 1.15 },
                TransformKind::Rotate { max_degrees: 15.0 },
                TransformKind::Crop { max_pixels: 2 },
            ],
            fill: Fill::Zero,
            tps_lambda: 0.0,
        }
    }

    /// Colour images: mild geometry plus brightness and hue, edge-replicated.
    pub fn photometric() -> Self {
        Self {
            members: vec![
                TransformKind::Tps { sigma: 1.0 },
                TransformKind::Scale { min: 0.9, max: 1.1 },
                TransformKind::Rotate { max_degrees: 10.0 },
                TransformKind::Brightness { max_delta: 0.2 },
                TransformKind::Hue { max_shift: 0.1 },
            ],
            fill: Fill::Edge,
            tps_lambda: 0.0,
        }
    }

    pub fn with_tps_sigma(mut self, sigma: f64) -> Self {
        for m in &mut self.members {
            if let TransformKind::Tps { sigma: s } = m {
                *s = sigma;
            }
        }
        self
    }
}

/// A concrete drawn operation.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformStep {
    Identity,
    Scale(f64),
    Rotate { degrees: f64 },
    /// Integer content shift produced by crop-and-re-pad.
    Crop { dx: i32, dy: i32 },
    Tps(ControlGrid),
    Brightness(f64),
    Hue(f64),
}

impl TransformStep {
    fn stage(&self) -> u8 {
        match self {
            Self::Identity | Self::Scale(_) | Self::Rotate { .. } | Self::Crop { .. } => 0,
            Self::Tps(_) => 1,
            Self::Brightness(_) | Self::Hue(_) => 2,
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Self::Identity => true,
            Self::Scale(s) => *s == 1.0,
            Self::Rotate { degrees } => *degrees == 0.0,
            Self::Crop { dx, dy } => *dx == 0 && *dy == 0,
            Self::Tps(g) => g.is_identity(),
            Self::Brightness(b) => *b == 0.0,
            Self::Hue(h) => *h == 0.0,
        }
    }
}

/// A drawn transformation `t ~ 𝒯`: geometric steps, then TPS, then photometric.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    steps: Vec<TransformStep>,
    fill: Fill,
    tps_lambda: f64,
}

impl TransformSpec {
    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    pub fn is_identity(&self) -> bool {
        self.steps.iter().all(TransformStep::is_identity)
    }

    /// Applies the transformation with a single resampling pass for all
    /// geometric steps.
    pub fn apply<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>, WarpError> {
        let (c, h, w) = image_dims(image)?;
        if !image.all_within(S::zero(), S::one()) {
            return Err(WarpError::OutOfRange);
        }
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        // Inverse of scale·rotation about the centre, then the crop shift.
        let mut inv = [[1.0, 0.0], [0.0, 1.0]];
        let mut shift = (0.0, 0.0);
        let mut spline: Option<TpsParams> = None;
        let mut geometric = false;
        for step in self.steps.iter().filter(|s| !s.is_identity()) {
            match step {
                TransformStep::Scale(s) => {
                    inv = mat_mul(inv, [[1.0 / s, 0.0], [0.0, 1.0 / s]]);
                    geometric = true;
                }
                TransformStep::Rotate { degrees } => {
                    let (sn, cs) = degrees.to_radians().sin_cos();
                    inv = mat_mul(inv, [[cs, sn], [-sn, cs]]);
                    geometric = true;
                }
                TransformStep::Crop { dx, dy } => {
                    shift = (shift.0 + *dx as f64, shift.1 + *dy as f64);
                    geometric = true;
                }
                TransformStep::Tps(grid) => {
                    // Backward warping: fit from the target grid to the source grid.
                    spline = Some(grid.swapped().fit(self.tps_lambda)?);
                    geometric = true;
                }
                _ => {}
            }
        }
        let mut out = if geometric {
            resample(image, self.fill, |x, y| {
                let (x, y) = match &spline {
                    Some(p) => {
                        let q = p.map([x, y]);
                        (q[0], q[1])
                    }
                    None => (x, y),
                };
                let (ux, uy) = (x - shift.0 - cx, y - shift.1 - cy);
                (inv[0][0] * ux + inv[0][1] * uy + cx, inv[1][0] * ux + inv[1][1] * uy + cy)
            })?
        } else {
            image.clone()
        };
        for step in self.steps.iter().filter(|s| !s.is_identity()) {
            match step {
                TransformStep::Brightness(b) => {
                    let b = S::from_f64(*b);
                    out = out.map(|v| (v + b).max(S::zero()).min(S::one()));
                }
                TransformStep::Hue(turns) if c == 3 => hue_rotate(&mut out, h * w, *turns),
                _ => {}
            }
        }
        Ok(out)
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Rotation about the grey axis of RGB space.
fn hue_rotate<S: Scalar>(img: &mut Tensor<S>, plane: usize, turns: f64) {
    let (sn, cs) = (turns * std::f64::consts::TAU).sin_cos();
    let third: f64 = 1.0 / 3.0;
    let root = third.sqrt();
    let a = cs + (1.0 - cs) * third;
    let b = third * (1.0 - cs) - root * sn;
    let c = third * (1.0 - cs) + root * sn;
    let m = [[a, b, c], [c, a, b], [b, c, a]];
    let data = img.data_mut();
    for p in 0..plane {
        let rgb = [data[p].to_f64(), data[plane + p].to_f64(), data[2 * plane + p].to_f64()];
        for (ch, row) in m.iter().enumerate() {
            let v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            data[ch * plane + p] = S::from_f64(v.clamp(0.0, 1.0));
        }
    }
}

/// Draws one member per family entry from its configured range.
pub fn sample_transform<R: Rng + ?Sized>(
    family: &TransformFamily,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<TransformSpec, WarpError> {
    if family.members.is_empty() {
        return Err(WarpError::EmptyFamily);
    }
    let mut steps = Vec::with_capacity(family.members.len());
    for kind in &family.members {
        kind.validate()?;
        let step = match *kind {
            TransformKind::Identity => TransformStep::Identity,
            TransformKind::Tps { sigma } => TransformStep::Tps(ControlGrid::jittered(height, width, sigma, rng)),
            TransformKind::Scale { min, max } => TransformStep::Scale(if max > min { rng.gen_range(min..=max) } else { min }),
            TransformKind::Rotate { max_degrees } => TransformStep::Rotate {
                degrees: symmetric(rng, max_degrees),
            },
            TransformKind::Crop { max_pixels } => {
                let m = max_pixels as i32;
                TransformStep::Crop {
                    dx: rng.gen_range(-m..=m),
                    dy: rng.gen_range(-m..=m),
                }
            }
            TransformKind::Brightness { max_delta } => TransformStep::Brightness(symmetric(rng, max_delta)),
            TransformKind::Hue { max_shift } => TransformStep::Hue(symmetric(rng, max_shift)),
        };
        steps.push(step);
    }
    steps.sort_by_key(TransformStep::stage);
    Ok(TransformSpec {
        steps,
        fill: family.fill,
        tps_lambda: family.tps_lambda,
    })
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// `n` independent draws `tᵢ(x_ori)`, stacked as `[n, c, h, w]`.
pub fn augment<S: Scalar, R: Rng + ?Sized>(
    x_ori: &Tensor<S>,
    count: usize,
    family: &TransformFamily,
    rng: &mut R,
) -> Result<Tensor<S>, WarpError> {
    let (c, h, w) = image_dims(x_ori)?;
    let mut data = Vec::with_capacity(count * c * h * w);
    for _ in 0..count {
        let t = sample_transform(family, h, w, rng)?;
        data.extend_from_slice(t.apply(x_ori)?.data());
    }
    Ok(Tensor::new(&[count, c, h, w], data).expect("consistent shape"))
}
