//! Inner damped-Newton solve of one implicit time step.
//!
//! Each step of the flow solves, for fixed `U_n`,
//!
//! ```text
//! (U - U_n) / dt = div(U_n grad Q)
//!              Q = div P
//!              0 = -grad U - H(P)/eps
//! ```
//!
//! The third equation is linearized around the previous iterate `P~` and
//! damped by `tau_k (P - P~)`, so with `M = H'(P~)/eps + tau_k I` (diagonal,
//! entries `>= tau_k`) it reads `M P = -grad U + b_P`,
//! `b_P = -H(P~)/eps + M P~`. Eliminating `P`, then `Q`, leaves one system
//! in `U`:
//!
//! ```text
//! [I/dt + L_n div M^-1 grad] U = U_n/dt + L_n div(M^-1 b_P),   L_n v = div(U_n grad v)
//! ```
//!
//! With `G` the gradient matrix and `div = -G^T` this is
//! `(I/dt + G^T W G G^T M^-1 G) U = U_n/dt + G^T W G G^T M^-1 b_P`, where `W`
//! holds the face mobilities. Both sides of the correction are discrete
//! divergences, so every column of `A - I/dt` sums to zero and mass is
//! conserved up to the linear-solver residual.

use crate::grid::{self, div, grad, Grid, GridError, ScalarField, VectorField};
use crate::linalg::{
    assemble_grad_matrix, solve_sparse, DirectSolver, LinalgError, LinearSettings, SolveMethod, SparseMatrix,
};
use std::cell::RefCell;
use crate::penalty::{h_prime_scalar, h_scalar, max_violation};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NewtonError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("density has negative value {value:e} at index {index}")]
    NegativeDensity { index: usize, value: f64 },
    #[error("density has no mass")]
    ZeroMass,
    #[error("linear solve failed at Newton iteration {k} (tau = {tau:e}): {source}")]
    LinearSolve {
        k: usize,
        tau: f64,
        #[source]
        source: LinalgError,
    },
}

/// Parameters of the implicit scheme and its inner Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Time step.
    pub dt: f64,
    /// Penalty weight; the relaxed constraint is `|p| - 1 = eps |grad u|`.
    pub eps: f64,
    pub tau0: f64,
    /// Geometric decay factor of the damping, in `(0, 1)`.
    pub tau_decay: f64,
    pub tau_min: f64,
    /// Stop once `||U_k - U_{k-1}|| / ||U_k|| <= eps_tol`.
    pub eps_tol: f64,
    pub max_inner: usize,
    pub linear: LinearSettings,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            eps: 1e-3,
            tau0: 1.0,
            tau_decay: 0.5,
            tau_min: 1e-6,
            eps_tol: 1e-6,
            max_inner: 50,
            linear: LinearSettings::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), NewtonError> {
        let positive = [
            ("dt", self.dt),
            ("eps", self.eps),
            ("tau0", self.tau0),
            ("tau_min", self.tau_min),
            ("eps_tol", self.eps_tol),
            ("tol_lin", self.linear.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NewtonError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tau_decay > 0.0 && self.tau_decay < 1.0) {
            return Err(NewtonError::InvalidConfig(format!(
                "tau_decay must lie in (0, 1), got {}",
                self.tau_decay
            )));
        }
        if self.max_inner == 0 {
            return Err(NewtonError::InvalidConfig("max_inner must be at least 1".into()));
        }
        Ok(())
    }

    /// Damping used at iteration `k`: `max(tau_min, tau0 * decay^k)`.
    pub fn tau_at(&self, k: usize) -> f64 {
        let mut tau = self.tau0;
        for _ in 0..k {
            tau = self.next_tau(tau);
        }
        tau
    }

    pub fn next_tau(&self, tau: f64) -> f64 {
        (self.tau_decay * tau).max(self.tau_min)
    }
}

/// Diagonal of `M = H'(P)/eps + tau I`, stacked `[x; y]`.
pub fn damping_diag(p: &VectorField, eps: f64, tau: f64) -> Vec<f64> {
    p.components().map(|s| h_prime_scalar(s) / eps + tau).collect()
}

/// `b_P = -H(P)/eps + M P`, stacked `[x; y]`.
fn dual_rhs(p: &VectorField, m_diag: &[f64], eps: f64) -> Vec<f64> {
    p.components()
        .zip(m_diag)
        .map(|(s, m)| -h_scalar(s) / eps + m * s)
        .collect()
}

/// Sup norm of the unlinearized dual equation `-grad U - H(P)/eps`.
pub fn dual_residual(u: &ScalarField, p: &VectorField, eps: f64) -> f64 {
    grad(u)
        .components()
        .zip(p.components())
        .map(|(g, s)| (-g - h_scalar(s) / eps).abs())
        .fold(0.0, f64::max)
}

/// Undershoot tolerated in `U_n`, relative to `max(U_n)`. The implicit scheme
/// does not preserve positivity exactly; the mobility clamps such values to 0.
pub const NEGATIVITY_REL_TOL: f64 = 1e-3;

/// Residual level at which the dual equation counts as solved:
/// `10 eps_tol |grad U|_inf`, plus a rounding floor for flat states.
pub fn residual_bound(u: &ScalarField, eps_tol: f64) -> f64 {
    let grad_sup = grad(u).norm_inf();
    10.0 * eps_tol * grad_sup + 16.0 * f64::EPSILON * u.norm_inf() / u.grid().h()
}

pub(crate) fn check_density(u: &ScalarField) -> Result<(), NewtonError> {
    let floor = -(NEGATIVITY_REL_TOL * u.max()).max(grid::MOBILITY_TOL);
    if let Some((index, &value)) = u.values().iter().enumerate().find(|(_, &v)| v < floor) {
        return Err(NewtonError::NegativeDensity { index, value });
    }
    Ok(())
}

/// The reduced system in `U` plus what is needed to recover `P` afterwards.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    /// Diagonal of `M`, stacked.
    pub m_diag: Vec<f64>,
    /// `b_P`, stacked.
    pub dual_rhs: Vec<f64>,
}

/// Operators that depend only on the grid and `U_n`; shared by all Newton
/// iterations of one time step.
#[derive(Debug)]
pub struct StepOperators {
    grid: Grid,
    grad: SparseMatrix,
    grad_t: SparseMatrix,
    /// `G^T W G` (the negated mobility operator `-L_n`).
    mobility: SparseMatrix,
    /// The reduced matrices of one time step share their sparsity pattern.
    direct: RefCell<DirectSolver>,
}

impl StepOperators {
    pub fn new(u_n: &ScalarField) -> Result<Self, NewtonError> {
        check_density(u_n)?;
        let grid = u_n.grid();
        let g = assemble_grad_matrix(&grid);
        let g_t = g.transpose();
        let w = grid::clamped_face_weights(u_n).to_stacked();
        let mobility = g_t.scale_cols(&w).matmul(&g).expect("shapes agree by construction");
        Ok(Self {
            grid,
            grad: g,
            grad_t: g_t,
            mobility,
            direct: RefCell::new(DirectSolver::new()),
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn reduce(
        &self,
        u_n: &ScalarField,
        p_prev: &VectorField,
        cfg: &SolverConfig,
        tau: f64,
    ) -> Result<ReducedSystem, NewtonError> {
        if u_n.grid() != self.grid || p_prev.grid() != self.grid {
            return Err(GridError::GridMismatch.into());
        }
        let m_diag = damping_diag(p_prev, cfg.eps, tau);
        let m_inv: Vec<f64> = m_diag.iter().map(|m| 1.0 / m).collect();
        let b_p = dual_rhs(p_prev, &m_diag, cfg.eps);

        // K = G^T M^-1 G, so div(M^-1 grad .) = -K.
        let k = self
            .grad_t
            .scale_cols(&m_inv)
            .matmul(&self.grad)
            .expect("shapes agree by construction");
        let fourth = self.mobility.matmul(&k).expect("shapes agree by construction");
        let n = self.grid.len();
        let matrix = SparseMatrix::identity(n)
            .add_scaled(1.0 / cfg.dt, &fourth, 1.0)
            .expect("shapes agree by construction");

        let scaled: Vec<f64> = b_p.iter().zip(&m_inv).map(|(b, mi)| b * mi).collect();
        let correction = self.mobility.mul_vec(&self.grad_t.mul_vec(&scaled));
        let rhs = u_n
            .values()
            .iter()
            .zip(&correction)
            .map(|(u, c)| u / cfg.dt + c)
            .collect();
        Ok(ReducedSystem {
            matrix,
            rhs,
            m_diag,
            dual_rhs: b_p,
        })
    }

    /// `P = M^-1 (-G U + b_P)`.
    fn recover_dual(&self, u: &ScalarField, sys: &ReducedSystem) -> VectorField {
        let gu = self.grad.mul_vec(u.values());
        let stacked: Vec<f64> = gu
            .iter()
            .zip(&sys.dual_rhs)
            .zip(&sys.m_diag)
            .map(|((g, b), m)| (b - g) / m)
            .collect();
        VectorField::from_stacked(self.grid, &stacked).expect("finite by construction")
    }
}

/// Builds the reduced system `(A, b)` for one Newton iteration.
pub fn reduce(
    u_n: &ScalarField,
    p_prev: &VectorField,
    cfg: &SolverConfig,
    tau: f64,
) -> Result<ReducedSystem, NewtonError> {
    StepOperators::new(u_n)?.reduce(u_n, p_prev, cfg, tau)
}

/// Iterate of the inner Newton process.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonState {
    pub u: ScalarField,
    pub q: ScalarField,
    pub p: VectorField,
    /// Number of Newton steps taken.
    pub k: usize,
    /// Damping the next step will use.
    pub tau_k: f64,
    /// `||U_k - U_{k-1}|| / ||U_k||`; infinite before the first step.
    pub rel_update: f64,
    pub nonlinear_residual: f64,
}

impl NewtonState {
    pub fn initial(u_n: &ScalarField, p_warm: &VectorField, cfg: &SolverConfig) -> Result<Self, NewtonError> {
        if p_warm.grid() != u_n.grid() {
            return Err(GridError::GridMismatch.into());
        }
        Ok(Self {
            u: u_n.clone(),
            q: div(p_warm),
            p: p_warm.clone(),
            k: 0,
            tau_k: cfg.tau0,
            rel_update: f64::INFINITY,
            nonlinear_residual: dual_residual(u_n, p_warm, cfg.eps),
        })
    }
}

fn relative_change(new: &ScalarField, old: &ScalarField) -> f64 {
    let diff: Vec<f64> = new.values().iter().zip(old.values()).map(|(a, b)| a - b).collect();
    let num = grid::norm2(&diff);
    let den = new.norm2();
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// One damped Newton step, reusing precomputed operators for `U_n`.
pub fn newton_step_with(
    ops: &StepOperators,
    state: &NewtonState,
    u_n: &ScalarField,
    cfg: &SolverConfig,
) -> Result<NewtonState, NewtonError> {
    let sys = ops.reduce(u_n, &state.p, cfg, state.tau_k)?;
    let solved = match cfg.linear.method {
        SolveMethod::Direct => ops.direct.borrow_mut().solve(&sys.matrix, &sys.rhs, &cfg.linear),
        SolveMethod::Iterative => solve_sparse(&sys.matrix, &sys.rhs, &cfg.linear),
    };
    let (x, _report) = solved.map_err(|source| {
        NewtonError::LinearSolve {
            k: state.k,
            tau: state.tau_k,
            source,
        }
    })?;
    let u = ScalarField::new(ops.grid(), x)?;
    let p = ops.recover_dual(&u, &sys);
    let q = div(&p);
    Ok(NewtonState {
        rel_update: relative_change(&u, &state.u),
        nonlinear_residual: dual_residual(&u, &p, cfg.eps),
        u,
        q,
        p,
        k: state.k + 1,
        tau_k: cfg.next_tau(state.tau_k),
    })
}

pub fn newton_step(state: &NewtonState, u_n: &ScalarField, cfg: &SolverConfig) -> Result<NewtonState, NewtonError> {
    if state.u.grid() != u_n.grid() {
        return Err(GridError::GridMismatch.into());
    }
    newton_step_with(&StepOperators::new(u_n)?, state, u_n, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerReport {
    pub iterations_used: usize,
    pub converged: bool,
    pub final_rel_update: f64,
    pub final_nonlinear_residual: f64,
    /// `max(|P| - 1, 0)` over all pixels and components.
    pub max_constraint_violation: f64,
    /// `rel_update` after every step, in order.
    pub rel_update_history: Vec<f64>,
}

impl InnerReport {
    /// Whether `rel_update` decreased strictly over the last five steps.
    /// Reported only; non-monotone tails are not treated as failures.
    pub fn monotone_tail(&self) -> bool {
        let h = &self.rel_update_history;
        let tail = &h[h.len().saturating_sub(5)..];
        tail.windows(2).all(|w| w[1] < w[0])
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub u: ScalarField,
    pub q: ScalarField,
    pub p: VectorField,
    pub report: InnerReport,
}

/// Runs Newton steps from `U^(0) = U_n`, `P^(0) = P_warm` until the relative
/// update drops below `eps_tol` or `max_inner` steps are spent. Running out of
/// iterations is not an error: the last iterate comes back with
/// `converged = false`.
pub fn solve_inner(u_n: &ScalarField, p_warm: &VectorField, cfg: &SolverConfig) -> Result<InnerSolution, NewtonError> {
    cfg.validate()?;
    check_density(u_n)?;
    if !(u_n.sum() > 0.0) {
        return Err(NewtonError::ZeroMass);
    }
    let ops = StepOperators::new(u_n)?;
    let mut state = NewtonState::initial(u_n, p_warm, cfg)?;
    let mut history = Vec::new();
    let mut converged = false;
    while state.k < cfg.max_inner {
        state = newton_step_with(&ops, &state, u_n, cfg)?;
        history.push(state.rel_update);
        if state.rel_update <= cfg.eps_tol && state.nonlinear_residual <= residual_bound(&state.u, cfg.eps_tol) {
            converged = true;
            break;
        }
    }
    let report = InnerReport {
        iterations_used: state.k,
        converged,
        final_rel_update: state.rel_update,
        final_nonlinear_residual: state.nonlinear_residual,
        max_constraint_violation: max_violation(&state.p),
        rel_update_history: history,
    };
    Ok(InnerSolution {
        u: state.u,
        q: state.q,
        p: state.p,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::weighted_elliptic;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn perturbed_constant(n: usize, bump: f64) -> ScalarField {
        let g = Grid::square(n).unwrap();
        ScalarField::from_fn(g, |i, j| if (i, j) == (n / 2, n / 2) { 1.0 + bump } else { 1.0 })
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(SolverConfig { tau_decay: 1.0, ..cfg() }.validate().is_err());
        assert!(SolverConfig { dt: 0.0, ..cfg() }.validate().is_err());
        assert!(SolverConfig { max_inner: 0, ..cfg() }.validate().is_err());
        assert!(SolverConfig { eps: -1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn tau_schedule_is_geometric_with_floor() {
        let c = SolverConfig { tau0: 1.0, tau_decay: 0.5, tau_min: 1e-3, ..cfg() };
        assert_eq!(c.tau_at(0), 1.0);
        assert_eq!(c.tau_at(3), 0.125);
        assert_eq!(c.tau_at(9), 1.0 / 512.0);
        assert_eq!(c.tau_at(10), 1e-3);
        assert_eq!(c.tau_at(40), 1e-3);
    }

    #[test]
    fn newton_steps_follow_tau_schedule() {
        let c = SolverConfig { tau_min: 0.05, ..cfg() };
        let u_n = perturbed_constant(6, 0.1);
        let mut s = NewtonState::initial(&u_n, &VectorField::zeros(u_n.grid()), &c).unwrap();
        for k in 1..=6 {
            s = newton_step(&s, &u_n, &c).unwrap();
            assert_eq!(s.k, k);
            assert_eq!(s.tau_k, (c.tau0 * c.tau_decay.powi(k as i32)).max(c.tau_min));
        }
    }

    #[test]
    fn constant_density_acts_like_identity_over_dt() {
        let g = Grid::square(5).unwrap();
        let u_n = ScalarField::constant(g, 0.3);
        let p: Vec<f64> = (0..2 * g.len()).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let p = VectorField::from_stacked(g, &p).unwrap();
        let c = SolverConfig { dt: 0.7, ..cfg() };
        let sys = reduce(&u_n, &p, &c, 0.2).unwrap();
        let ones = vec![2.0; g.len()];
        for v in sys.matrix.mul_vec(&ones) {
            assert!((v - 2.0 / 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn inactive_damping_gives_scaled_bilaplacian() {
        // U_n = 1, all |P| < 1: A = I/dt + (1/tau) (div grad)^2.
        let g = Grid::square(6).unwrap();
        let u_n = ScalarField::constant(g, 1.0);
        let p = VectorField::zeros(g);
        let (dt, tau) = (0.5, 0.25);
        let sys = reduce(&u_n, &p, &SolverConfig { dt, ..cfg() }, tau).unwrap();
        let v = ScalarField::from_fn(g, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let lap = |f: &ScalarField| div(&grad(f));
        let expected: Vec<f64> = v
            .values()
            .iter()
            .zip(lap(&lap(&v)).values())
            .map(|(x, b)| x / dt + b / tau)
            .collect();
        for (a, b) in sys.matrix.mul_vec(v.values()).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn reduced_operator_has_divergence_structure() {
        let g = Grid::square(6).unwrap();
        let u_n = ScalarField::from_fn(g, |i, j| 0.1 + (i * j) as f64 * 0.05);
        let p = VectorField::from_stacked(
            g,
            &(0..2 * g.len()).map(|i| ((i as f64) * 0.61).cos() * 1.5).collect::<Vec<_>>(),
        )
        .unwrap();
        let c = SolverConfig { eps: 1e-2, dt: 0.3, ..cfg() };
        let sys = reduce(&u_n, &p, &c, 0.1).unwrap();
        let n = g.len();
        let scale = sys.matrix.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for r in 0..n {
            let row_sum: f64 = sys.matrix.row(r).map(|(_, v)| v).sum::<f64>() - 1.0 / c.dt;
            assert!(row_sum.abs() <= 1e-12 * scale, "row {r}: {row_sum}");
        }
        let at = sys.matrix.transpose();
        for c_idx in 0..n {
            let col_sum: f64 = at.row(c_idx).map(|(_, v)| v).sum::<f64>() - 1.0 / c.dt;
            assert!(col_sum.abs() <= 1e-12 * scale);
        }
        // The right-hand side correction is a divergence too.
        let correction: f64 = sys.rhs.iter().zip(u_n.values()).map(|(b, u)| b - u / c.dt).sum();
        assert!(correction.abs() <= 1e-12 * scale);
    }

    #[test]
    fn reduce_rejects_negative_density() {
        let g = Grid::square(4).unwrap();
        let mut v = vec![1.0; 16];
        v[3] = -1e-2;
        let u_n = ScalarField::new(g, v).unwrap();
        assert!(matches!(
            reduce(&u_n, &VectorField::zeros(g), &cfg(), 1.0),
            Err(NewtonError::NegativeDensity { index: 3, .. })
        ));
    }

    #[test]
    fn constant_state_is_a_fixed_point() {
        let g = Grid::square(8).unwrap();
        let u_n = ScalarField::constant(g, 0.25);
        let s0 = NewtonState::initial(&u_n, &VectorField::zeros(g), &cfg()).unwrap();
        let s1 = newton_step(&s0, &u_n, &cfg()).unwrap();
        assert!(s1.rel_update <= 1e-12);
        assert!(s1.nonlinear_residual <= 1e-12);
        for (a, b) in s1.u.values().iter().zip(u_n.values()) {
            assert!((a - b).abs() <= 1e-14);
        }
        assert!(s1.p.components().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn one_step_reduces_dual_residual() {
        let u_n = perturbed_constant(8, 0.1);
        let c = cfg();
        let s0 = NewtonState::initial(&u_n, &VectorField::zeros(u_n.grid()), &c).unwrap();
        let s1 = newton_step(&s0, &u_n, &c).unwrap();
        assert!(s1.nonlinear_residual < s0.nonlinear_residual);
    }

    #[test]
    fn iterate_satisfies_linearized_equations() {
        // After one step the first two equations hold exactly (to solver
        // precision); check them with the matrix-free operators.
        let u_n = perturbed_constant(7, 0.3);
        let c = SolverConfig { dt: 0.4, ..cfg() };
        let s0 = NewtonState::initial(&u_n, &VectorField::zeros(u_n.grid()), &c).unwrap();
        let s1 = newton_step(&s0, &u_n, &c).unwrap();
        let flux = weighted_elliptic(&u_n, &s1.q).unwrap();
        for ((u, un), f) in s1.u.values().iter().zip(u_n.values()).zip(flux.values()) {
            assert!(((u - un) / c.dt - f).abs() < 1e-8);
        }
        assert_eq!(s1.q, div(&s1.p));
    }

    #[test]
    fn solve_inner_constant_converges_immediately() {
        let g = Grid::square(6).unwrap();
        let u_n = ScalarField::constant(g, 1.0 / 36.0);
        let sol = solve_inner(&u_n, &VectorField::zeros(g), &cfg()).unwrap();
        assert!(sol.report.converged);
        assert_eq!(sol.report.iterations_used, 1);
        for (a, b) in sol.u.values().iter().zip(u_n.values()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn solve_inner_conserves_mass_and_relaxes_constraint() {
        let u_n = perturbed_constant(10, 2.0);
        let c = SolverConfig { eps: 1e-3, ..cfg() };
        let sol = solve_inner(&u_n, &VectorField::zeros(u_n.grid()), &c).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert!((sol.u.sum() - u_n.sum()).abs() <= 1e-8 * u_n.sum());
        let gmax = grad(&sol.u).norm_inf();
        assert!(sol.report.max_constraint_violation <= c.eps * gmax * (1.0 + 10.0 * c.eps_tol));
    }

    #[test]
    fn solve_inner_reports_non_convergence() {
        let u_n = perturbed_constant(10, 2.0);
        let c = SolverConfig { max_inner: 2, ..cfg() };
        let sol = solve_inner(&u_n, &VectorField::zeros(u_n.grid()), &c).unwrap();
        assert!(!sol.report.converged);
        assert_eq!(sol.report.iterations_used, 2);
        assert_eq!(sol.report.rel_update_history.len(), 2);
    }

    #[test]
    fn solve_inner_rejects_zero_mass() {
        let g = Grid::square(4).unwrap();
        assert!(matches!(
            solve_inner(&ScalarField::zeros(g), &VectorField::zeros(g), &cfg()),
            Err(NewtonError::ZeroMass)
        ));
    }
}
