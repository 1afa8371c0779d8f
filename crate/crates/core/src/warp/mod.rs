//! Image deformations: thin-plate splines plus the label-preserving
//! transformation family used to build single-image training sets.

mod tps;
mod transform;

pub use tps::{kernel as tps_kernel, tps_fit, ControlGrid, Point, TpsParams, GRID_POINTS, GRID_SIDE};
pub use transform::{augment, sample_transform, TransformFamily, TransformKind, TransformSpec, TransformStep};

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("control grid needs {expected} source and target points, got {sources} and {targets}", expected = GRID_POINTS)]
    GridSize { sources: usize, targets: usize },
    #[error("source control points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("singular spline system (degenerate control points); retry with regularization λ > 0")]
    Singular,
    #[error("regularization must be finite and non-negative, got {0}")]
    Regularization(f64),
    #[error("expected an image shaped [channels, height, width], got {0:?}")]
    ImageShape(Vec<usize>),
    #[error("image values must lie in [0, 1]")]
    OutOfRange,
    #[error("transformation family is empty")]
    EmptyFamily,
    #[error("invalid transformation parameter: {0}")]
    Parameter(String),
}

/// How reads outside the source image are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fill {
    /// Black background.
    #[default]
    Zero,
    /// Nearest edge pixel.
    Edge,
}

pub(crate) fn image_dims<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize, usize), WarpError> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(WarpError::ImageShape(s.to_vec())),
    }
}

/// Backward warp: output pixel `(x, y)` reads the source at `map(x, y)` with
/// bilinear interpolation.
pub fn resample<S: Scalar>(
    image: &Tensor<S>,
    fill: Fill,
    map: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Tensor<S>, WarpError> {
    let (c, h, w) = image_dims(image)?;
    let src = image.data();
    let mut out = vec![S::zero(); c * h * w];
    let read = |plane: &[S], ix: isize, iy: isize| -> f64 {
        let inside = ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h;
        match (inside, fill) {
            (true, _) => plane[iy as usize * w + ix as usize].to_f64(),
            (false, Fill::Zero) => 0.0,
            (false, Fill::Edge) => {
                let cx = ix.clamp(0, w as isize - 1) as usize;
                let cy = iy.clamp(0, h as isize - 1) as usize;
                plane[cy * w + cx].to_f64()
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            if !(sx.is_finite() && sy.is_finite()) {
                continue;
            }
            let (sx, sy) = (snap(sx), snap(sy));
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut v = (1.0 - fx) * (1.0 - fy) * read(plane, x0, y0);
                if fx > 0.0 {
                    v += fx * (1.0 - fy) * read(plane, x0 + 1, y0);
                }
                if fy > 0.0 {
                    v += (1.0 - fx) * fy * read(plane, x0, y0 + 1);
                    if fx > 0.0 {
                        v += fx * fy * read(plane, x0 + 1, y0 + 1);
                    }
                }
                out[ch * h * w + y * w + x] = S::from_f64(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(image.shape(), out).expect("same shape"))
}

// Solver round-off must not turn an integer read into a blend with a neighbour.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Warps `image` by sampling it at `params.map(p)` for every output pixel `p`.
/// Reads outside the image return 0.
pub fn tps_apply<S: Scalar>(image: &Tensor<S>, params: &TpsParams) -> Result<Tensor<S>, WarpError> {
    tps_apply_with(image, params, Fill::Zero)
}

pub fn tps_apply_with<S: Scalar>(image: &Tensor<S>, params: &TpsParams, fill: Fill) -> Result<Tensor<S>, WarpError> {
    if !image.all_within(S::zero(), S::one()) {
        return Err(WarpError::OutOfRange);
    }
    resample(image, fill, |x, y| {
        let p = params.map([x, y]);
        (p[0], p[1])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        let data = (0..h * w).map(|i| ((i % w) as f64 + (i / w) as f64) / (h + w) as f64).collect();
        Tensor::new(&[1, h, w], data).unwrap()
    }

    #[test]
    fn identity_params_are_pixel_exact() {
        let img = ramp(28, 28);
        let p = ControlGrid::lattice(28, 28).fit(0.0).unwrap();
        assert_eq!(tps_apply(&img, &p).unwrap(), img);
        let exact = tps_apply(&img, &TpsParams::identity(ControlGrid::lattice(28, 28).source().to_vec())).unwrap();
        assert_eq!(exact, img);
    }

    #[test]
    fn unit_translation_shifts_one_column() {
        let img = ramp(12, 10);
        let g = ControlGrid::lattice(12, 10);
        let target = g.source().iter().map(|s| [s[0] + 1.0, s[1]]).collect();
        let p = ControlGrid::new(g.source().to_vec(), target).unwrap().fit(0.0).unwrap();
        let out = tps_apply(&img, &p).unwrap();
        for y in 0..12 {
            for x in 0..9 {
                let (a, b) = (out.data()[y * 10 + x], img.data()[y * 10 + x + 1]);
                assert!((a - b).abs() < 1e-6, "({x},{y}) {a} vs {b}");
            }
            assert_eq!(out.data()[y * 10 + 9], 0.0);
        }
    }

    #[test]
    fn rejects_out_of_range_images() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.5, 0.0, 0.0]).unwrap();
        let p = TpsParams::identity(vec![[0.0, 0.0]]);
        assert_eq!(tps_apply(&img, &p).unwrap_err(), WarpError::OutOfRange);
    }
}
