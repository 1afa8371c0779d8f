//! Thin-plate-spline fitting with kernel `U(r) = r²·ln r`, `U(0) = 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::WarpError;

/// Control points per image side.
pub const GRID_SIDE: usize = 5;
pub const GRID_POINTS: usize = GRID_SIDE * GRID_SIDE;

pub type Point = [f64; 2];

/// Paired source/target control points in pixel coordinates `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    source: Vec<Point>,
    target: Vec<Point>,
}

impl ControlGrid {
    pub fn new(source: Vec<Point>, target: Vec<Point>) -> Result<Self, WarpError> {
        if source.len() != GRID_POINTS || target.len() != GRID_POINTS {
            return Err(WarpError::GridSize {
                sources: source.len(),
                targets: target.len(),
            });
        }
        Ok(Self { source, target })
    }

    /// Regular 5×5 lattice spanning pixel centres `0..=w-1` × `0..=h-1`, with
    /// targets equal to sources.
    pub fn lattice(height: usize, width: usize) -> Self {
        let step = |extent: usize, i: usize| (extent.saturating_sub(1)) as f64 * i as f64 / (GRID_SIDE - 1) as f64;
        let source: Vec<Point> = (0..GRID_SIDE)
            .flat_map(|r| (0..GRID_SIDE).map(move |c| (r, c)))
            .map(|(r, c)| [step(width, c), step(height, r)])
            .collect();
        Self {
            target: source.clone(),
            source,
        }
    }

    /// Lattice whose targets carry i.i.d. `N(0, σ²)` offsets per coordinate.
    pub fn jittered<R: Rng + ?Sized>(height: usize, width: usize, sigma: f64, rng: &mut R) -> Self {
        let mut grid = Self::lattice(height, width);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
            for t in &mut grid.target {
                t[0] += normal.sample(rng);
                t[1] += normal.sample(rng);
            }
        }
        grid
    }

    pub fn source(&self) -> &[Point] {
        &self.source
    }

    pub fn target(&self) -> &[Point] {
        &self.target
    }

    /// Same pairs with the roles of source and target exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    /// Fits the spline sending each source point to its target.
    pub fn fit(&self, lambda: f64) -> Result<TpsParams, WarpError> {
        tps_fit(&self.source, &self.target, lambda)
    }
}

/// `f(p) = a₀ + a₁·x + a₂·y + Σᵢ wᵢ·U(‖p − cᵢ‖)` evaluated per output axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    centers: Vec<Point>,
    weights: Vec<Point>,
    affine: [Point; 3],
}

pub fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        // r²·ln r = ½·r²·ln r²
        0.5 * r2 * r2.ln()
    }
}

fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Solves the `(n+3)×(n+3)` bordered system `[K + λI, P; Pᵀ, 0]`.
pub fn tps_fit(source: &[Point], target: &[Point], lambda: f64) -> Result<TpsParams, WarpError> {
    if source.len() != target.len() || source.is_empty() {
        return Err(WarpError::GridSize {
            sources: source.len(),
            targets: target.len(),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(WarpError::Regularization(lambda));
    }
    let n = source.len();
    for i in 0..n {
        for j in 0..i {
            if dist2(source[i], source[j]) == 0.0 {
                return Err(WarpError::DuplicatePoint(i, j));
            }
        }
    }
    let dim = n + 3;
    let mut l = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = kernel(dist2(source[i], source[j]));
        }
        l[(i, i)] += lambda;
        let row = [1.0, source[i][0], source[i][1]];
        for (k, &v) in row.iter().enumerate() {
            l[(i, n + k)] = v;
            l[(n + k, i)] = v;
        }
    }
    let lu = l.lu();
    let mut coef = [DVector::<f64>::zeros(dim), DVector::<f64>::zeros(dim)];
    for (axis, out) in coef.iter_mut().enumerate() {
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            rhs[i] = target[i][axis];
        }
        let sol = lu.solve(&rhs).ok_or(WarpError::Singular)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(WarpError::Singular);
        }
        *out = sol;
    }
    let weights = (0..n).map(|i| [coef[0][i], coef[1][i]]).collect();
    let affine = [
        [coef[0][n], coef[1][n]],
        [coef[0][n + 1], coef[1][n + 1]],
        [coef[0][n + 2], coef[1][n + 2]],
    ];
    Ok(TpsParams {
        centers: source.to_vec(),
        weights,
        affine,
    })
}

impl TpsParams {
    /// Identity map over the given centres (zero radial weights).
    pub fn identity(centers: Vec<Point>) -> Self {
        let weights = vec![[0.0, 0.0]; centers.len()];
        Self {
            centers,
            weights,
            affine: [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        }
    }

    pub fn weights(&self) -> &[Point] {
        &self.weights
    }

    /// Rows: constant term, x coefficient, y coefficient; columns: output axis.
    pub fn affine(&self) -> &[Point; 3] {
        &self.affine
    }

    pub fn map(&self, p: Point) -> Point {
        let a = &self.affine;
        let mut out = [
            a[0][0] + a[1][0] * p[0] + a[2][0] * p[1],
            a[0][1] + a[1][1] * p[0] + a[2][1] * p[1],
        ];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let u = kernel(dist2(p, *c));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    /// Residuals `Σw`, `Σw·x`, `Σw·y` (largest magnitude across both axes).
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for axis in 0..2 {
            let s: f64 = self.weights.iter().map(|w| w[axis]).sum();
            let sx: f64 = self.weights.iter().zip(&self.centers).map(|(w, c)| w[axis] * c[0]).sum();
            let sy: f64 = self.weights.iter().zip(&self.centers).map(|(w, c)| w[axis] * c[1]).sum();
            worst = worst.max(s.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }
}
