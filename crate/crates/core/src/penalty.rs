//! Anisotropic quadratic penalty relaxing the box constraint `|p1|, |p2| <= 1`.
//!
//! `F(p) = 1/2 sum max(|p1| - 1, 0)^2 + 1/2 sum max(|p2| - 1, 0)^2`, with
//! componentwise derivative `H` and diagonal Jacobian `H'`.

use crate::grid::VectorField;

/// `F`, `H` and `diag(H')` evaluated together.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEval {
    pub value: f64,
    pub grad: VectorField,
    pub jac_diag: VectorField,
}

impl PenaltyEval {
    pub fn new(p: &VectorField) -> Self {
        Self {
            value: penalty_value(p),
            grad: penalty_grad(p),
            jac_diag: penalty_jac_diag(p),
        }
    }
}

#[inline]
pub fn excess(s: f64) -> f64 {
    (s.abs() - 1.0).max(0.0)
}

/// Scalar derivative: `sgn(s) (|s| - 1)` on `|s| >= 1`, zero inside.
#[inline]
pub fn h_scalar(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        s.signum() * (s.abs() - 1.0)
    } else {
        0.0
    }
}

/// Scalar Jacobian: the indicator of the closed set `|s| >= 1`.
#[inline]
pub fn h_prime_scalar(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        1.0
    } else {
        0.0
    }
}

pub fn penalty_value(p: &VectorField) -> f64 {
    0.5 * p.components().map(|s| excess(s).powi(2)).sum::<f64>()
}

pub fn penalty_grad(p: &VectorField) -> VectorField {
    p.map(h_scalar)
}

pub fn penalty_jac_diag(p: &VectorField) -> VectorField {
    p.map(h_prime_scalar)
}

/// Largest constraint violation `max(|p| - 1, 0)` over all components.
pub fn max_violation(p: &VectorField) -> f64 {
    p.components().map(excess).fold(0.0, f64::max)
}
