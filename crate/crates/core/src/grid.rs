//! Uniform 2D grids, grid functions and the forward/backward difference pair.
//!
//! Fields are stored row-major: the value at column `i` (x direction) and row
//! `j` (y direction) lives at `j * nx + i`. The gradient uses forward
//! differences padded with zero on the far boundary and the divergence is its
//! exact negative adjoint, so `<grad u, p> = -<u, div p>` holds for every pair
//! of fields and `sum(div p) = 0` (no-flux closure).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid must be at least 2x2 with h > 0 (got {nx}x{ny}, h = {h})")]
    InvalidGrid { nx: usize, ny: usize, h: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("negative mobility {value:e} at index {index}")]
    NegativeMobility { index: usize, value: f64 },
}

/// Tolerance below which a mobility value counts as a genuine negative.
pub const MOBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    h: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, h: f64) -> Result<Self, GridError> {
        if nx < 2 || ny < 2 || !(h > 0.0) || !h.is_finite() {
            return Err(GridError::InvalidGrid { nx, ny, h });
        }
        Ok(Self { nx, ny, h })
    }

    /// Square `n x n` grid with unit spacing.
    pub fn square(n: usize) -> Result<Self, GridError> {
        Self::new(n, n, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    /// Same pixel layout with a different spacing.
    pub fn with_h(&self, h: f64) -> Result<Self, GridError> {
        Self::new(self.nx, self.ny, h)
    }
}

fn check_finite(values: &[f64]) -> Result<(), GridError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(GridError::NonFinite { index }),
        None => Ok(()),
    }
}

/// A real-valued function on the pixels of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Builds a field by evaluating `f(i, j)` at every pixel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                values.push(f(i, j));
            }
        }
        assert!(values.iter().all(|v| v.is_finite()), "non-finite field value");
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// Applies `f` pointwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        assert!(values.iter().all(|v| v.is_finite()), "non-finite field value");
        Self {
            grid: self.grid,
            values,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.values)
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// A pair of grid functions `(p1, p2)`: x and y components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, x: Vec<f64>, y: Vec<f64>) -> Result<Self, GridError> {
        for comp in [&x, &y] {
            if comp.len() != grid.len() {
                return Err(GridError::LengthMismatch {
                    expected: grid.len(),
                    got: comp.len(),
                });
            }
            check_finite(comp)?;
        }
        Ok(Self { grid, x, y })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            x: vec![0.0; grid.len()],
            y: vec![0.0; grid.len()],
        }
    }

    /// Unpacks a stacked `[x; y]` vector of length `2 * grid.len()`.
    pub fn from_stacked(grid: Grid, stacked: &[f64]) -> Result<Self, GridError> {
        if stacked.len() != 2 * grid.len() {
            return Err(GridError::LengthMismatch {
                expected: 2 * grid.len(),
                got: stacked.len(),
            });
        }
        let (x, y) = stacked.split_at(grid.len());
        Self::new(grid, x.to_vec(), y.to_vec())
    }

    /// Stacks the components as `[x; y]`.
    pub fn to_stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.x.len());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.y);
        out
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Applies `f` independently to every entry of both components.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            x: self.x.iter().map(|&v| f(v)).collect(),
            y: self.y.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn components(&self) -> impl Iterator<Item = f64> + '_ {
        self.x.iter().chain(self.y.iter()).copied()
    }

    pub fn norm2(&self) -> f64 {
        (dot(&self.x, &self.x) + dot(&self.y, &self.y)).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.components().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &VectorField) -> f64 {
        dot(&self.x, &other.x) + dot(&self.y, &other.y)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Forward-difference gradient with zero padding at `i = nx-1` / `j = ny-1`.
pub fn grad(u: &ScalarField) -> VectorField {
    let g = u.grid;
    let (nx, ny) = (g.nx, g.ny);
    let inv_h = 1.0 / g.h;
    let v = &u.values;
    let mut x = vec![0.0; g.len()];
    let mut y = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if i + 1 < nx {
                x[k] = (v[k + 1] - v[k]) * inv_h;
            }
            if j + 1 < ny {
                y[k] = (v[k + nx] - v[k]) * inv_h;
            }
        }
    }
    VectorField { grid: g, x, y }
}

/// Backward-difference divergence, the negative adjoint of [`grad`].
pub fn div(p: &VectorField) -> ScalarField {
    let g = p.grid;
    let (nx, ny) = (g.nx, g.ny);
    let inv_h = 1.0 / g.h;
    let mut out = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            let d1 = if i == 0 {
                p.x[k]
            } else if i == nx - 1 {
                -p.x[k - 1]
            } else {
                p.x[k] - p.x[k - 1]
            };
            let d2 = if j == 0 {
                p.y[k]
            } else if j == ny - 1 {
                -p.y[k - nx]
            } else {
                p.y[k] - p.y[k - nx]
            };
            out[k] = (d1 + d2) * inv_h;
        }
    }
    ScalarField {
        grid: g,
        values: out,
    }
}

/// Face mobilities for the x- and y-faces: the mean of the two adjacent
/// pixel values, clamped at zero. Faces past the far boundary get weight 0.
pub fn face_weights(w: &ScalarField) -> Result<VectorField, GridError> {
    if let Some((index, &value)) = w
        .values
        .iter()
        .enumerate()
        .find(|(_, &v)| v < -MOBILITY_TOL)
    {
        return Err(GridError::NegativeMobility { index, value });
    }
    Ok(clamped_face_weights(w))
}

/// [`face_weights`] without the sign check; negative means clamp to zero.
pub(crate) fn clamped_face_weights(w: &ScalarField) -> VectorField {
    let g = w.grid;
    let (nx, ny) = (g.nx, g.ny);
    let v = &w.values;
    let mut x = vec![0.0; g.len()];
    let mut y = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if i + 1 < nx {
                x[k] = (0.5 * (v[k] + v[k + 1])).max(0.0);
            }
            if j + 1 < ny {
                y[k] = (0.5 * (v[k] + v[k + nx])).max(0.0);
            }
        }
    }
    VectorField { grid: g, x, y }
}

/// The mobility-weighted operator `div(w grad q)`; symmetric negative
/// semidefinite for `w >= 0`.
pub fn weighted_elliptic(w: &ScalarField, q: &ScalarField) -> Result<ScalarField, GridError> {
    if w.grid != q.grid {
        return Err(GridError::GridMismatch);
    }
    let faces = face_weights(w)?;
    let mut flux = grad(q);
    for (f, wf) in flux.x.iter_mut().zip(&faces.x) {
        *f *= wf;
    }
    for (f, wf) in flux.y.iter_mut().zip(&faces.y) {
        *f *= wf;
    }
    Ok(div(&flux))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scalar(grid: Grid, rng: &mut ChaCha8Rng) -> ScalarField {
        ScalarField::from_fn(grid, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vector(grid: Grid, rng: &mut ChaCha8Rng) -> VectorField {
        let x = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        VectorField::new(grid, x, y).unwrap()
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::new(1, 4, 1.0).is_err());
        assert!(Grid::new(4, 1, 1.0).is_err());
        assert!(Grid::new(4, 4, 0.0).is_err());
        assert!(Grid::new(4, 4, f64::NAN).is_err());
        assert!(Grid::new(2, 2, 0.5).is_ok());
    }

    #[test]
    fn rejects_non_finite_values() {
        let g = Grid::square(2).unwrap();
        let err = ScalarField::new(g, vec![0.0, 1.0, f64::NAN, 2.0]).unwrap_err();
        assert_eq!(err, GridError::NonFinite { index: 2 });
        assert!(ScalarField::new(g, vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let g = Grid::new(5, 7, 0.3).unwrap();
        let p = grad(&ScalarField::constant(g, 3.25));
        assert!(p.components().all(|v| v == 0.0));
    }

    #[test]
    fn grad_of_linear_ramp() {
        let g = Grid::square(4).unwrap();
        let u = ScalarField::from_fn(g, |i, _| i as f64);
        let p = grad(&u);
        for j in 0..4 {
            for i in 0..4 {
                let k = g.index(i, j);
                let expected = if i < 3 { 1.0 } else { 0.0 };
                assert_eq!(p.x()[k], expected);
                assert_eq!(p.y()[k], 0.0);
            }
        }
    }

    #[test]
    fn div_of_zero_is_zero() {
        let g = Grid::square(6).unwrap();
        assert!(div(&VectorField::zeros(g)).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn div_explicit_boundary_closure() {
        // 3x2 grid, h = 0.5: check each stencil branch by hand.
        let g = Grid::new(3, 2, 0.5).unwrap();
        let p = VectorField::new(g, vec![1.0, 2.0, 9.0, 4.0, 8.0, 9.0], vec![3.0, 5.0, 7.0, 9.0, 9.0, 9.0])
            .unwrap();
        let d = div(&p);
        // (i=0,j=0): p1 = 1, p2 = 3 -> (1 + 3)/0.5
        assert_eq!(d.at(0, 0), 8.0);
        // (i=1,j=0): (2-1) + 5 -> 12
        assert_eq!(d.at(1, 0), 12.0);
        // (i=2,j=0): -2 + 7 -> 10
        assert_eq!(d.at(2, 0), 10.0);
        // (i=0,j=1): 4 - 3 -> 2
        assert_eq!(d.at(0, 1), 2.0);
        // (i=1,j=1): (8-4) - 5 -> -2
        assert_eq!(d.at(1, 1), -2.0);
        // (i=2,j=1): -8 - 7 -> -30
        assert_eq!(d.at(2, 1), -30.0);
    }

    #[test]
    fn adjointness_on_random_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::square(16).unwrap();
        let u = random_scalar(g, &mut rng);
        let p = random_vector(g, &mut rng);
        let lhs = grad(&u).dot(&p);
        let rhs = u.dot(&div(&p));
        assert!((lhs + rhs).abs() <= 1e-13 * u.norm2() * p.norm2());
    }

    #[test]
    fn weighted_elliptic_identity_weight_is_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::new(7, 5, 0.25).unwrap();
        let q = random_scalar(g, &mut rng);
        let lw = weighted_elliptic(&ScalarField::constant(g, 1.0), &q).unwrap();
        let lap = div(&grad(&q));
        for (a, b) in lw.values().iter().zip(lap.values()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn weighted_elliptic_annihilates_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::square(8).unwrap();
        let w = random_scalar(g, &mut rng).map(f64::abs);
        let out = weighted_elliptic(&w, &ScalarField::constant(g, -4.0)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_elliptic_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Grid::square(8).unwrap();
        let w = random_scalar(g, &mut rng).map(f64::abs);
        let q1 = random_scalar(g, &mut rng);
        let q2 = random_scalar(g, &mut rng);
        let a = weighted_elliptic(&w, &q1).unwrap().dot(&q2);
        let b = q1.dot(&weighted_elliptic(&w, &q2).unwrap());
        assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
    }

    #[test]
    fn weighted_elliptic_rejects_negative_mobility() {
        let g = Grid::square(3).unwrap();
        let mut vals = vec![1.0; 9];
        vals[4] = -1e-6;
        let w = ScalarField::new(g, vals).unwrap();
        let err = weighted_elliptic(&w, &ScalarField::zeros(g)).unwrap_err();
        assert!(matches!(err, GridError::NegativeMobility { index: 4, .. }));
        // Rounding-level negatives are tolerated.
        let mut vals = vec![1.0; 9];
        vals[4] = -1e-14;
        let w = ScalarField::new(g, vals).unwrap();
        assert!(weighted_elliptic(&w, &ScalarField::zeros(g)).is_ok());
    }

    #[test]
    fn zero_mobility_gap_blocks_flux() {
        // Face mobility is the clamped mean, so only faces where both
        // neighbours vanish carry no flux.
        let g = Grid::new(4, 2, 1.0).unwrap();
        let w = ScalarField::from_fn(g, |i, _| if i < 2 { 1.0 } else { 0.0 });
        let f = face_weights(&w).unwrap();
        assert_eq!(f.x()[g.index(0, 0)], 1.0);
        assert_eq!(f.x()[g.index(1, 0)], 0.5);
        assert_eq!(f.x()[g.index(2, 0)], 0.0);
    }

    fn arb_pair() -> impl Strategy<Value = (ScalarField, VectorField)> {
        (2usize..=64, 2usize..=64, 0.05f64..2.0, any::<u64>()).prop_map(|(nx, ny, h, seed)| {
            let g = Grid::new(nx, ny, h).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (random_scalar(g, &mut rng), random_vector(g, &mut rng))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn adjointness_holds((u, p) in arb_pair()) {
            let gap = grad(&u).dot(&p) + u.dot(&div(&p));
            prop_assert!(gap.abs() <= 1e-12 * (u.norm2() * p.norm2()).max(1.0));
        }

        #[test]
        fn divergence_sums_to_zero((_u, p) in arb_pair()) {
            let l1: f64 = p.components().map(f64::abs).sum();
            prop_assert!(div(&p).sum().abs() <= 1e-12 * l1.max(1.0) / p.grid().h());
        }

        #[test]
        fn weighted_elliptic_negative_semidefinite((u, p) in arb_pair()) {
            let w = u.map(f64::abs);
            let q = ScalarField::new(p.grid(), p.x().to_vec()).unwrap();
            let form = weighted_elliptic(&w, &q).unwrap().dot(&q);
            prop_assert!(form <= 1e-12 * q.dot(&q));
        }
    }
}
