//! Outer time stepping of the TV-Wasserstein flow.

use crate::grid::{self, Grid, ScalarField, VectorField};
use crate::imaging::mass;
use crate::newton::{solve_inner, InnerReport, NewtonError, SolverConfig};
use thiserror::Error;

pub type SinkError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("initial density is invalid: {0}")]
    InvalidInitial(String),
    #[error("n_steps must be at least 1")]
    NoSteps,
    #[error("time step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: NewtonError,
    },
    #[error("inner Newton solve did not converge at time step {step} (rel_update = {rel_update:e})")]
    NotConverged { step: usize, rel_update: f64 },
    #[error("output sink failed at step {step}: {source}")]
    Sink {
        step: usize,
        #[source]
        source: SinkError,
    },
}

/// Scales `u` so that `h^2 * sum(u) = 1`.
pub fn normalize_mass(u: &ScalarField) -> Result<ScalarField, FlowError> {
    if u.min() < 0.0 {
        return Err(FlowError::InvalidInitial(format!(
            "density has negative value {:e}",
            u.min()
        )));
    }
    let m = mass(u);
    if !(m > 0.0) {
        return Err(FlowError::InvalidInitial("density has zero mass".into()));
    }
    let s = 1.0 / m;
    Ok(u.map(|v| v * s))
}

/// Everything needed to run the flow.
#[derive(Debug, Clone)]
pub struct FlowRun {
    pub config: SolverConfig,
    pub n_steps: usize,
    pub initial: ScalarField,
    /// Clip negative values after each step and rescale to the previous mass.
    pub clamp_renormalize: bool,
    /// Emit a frame every `frame_stride` steps (0 disables frames).
    pub frame_stride: usize,
    /// Abort when an inner solve fails to converge.
    pub strict: bool,
}

impl FlowRun {
    pub fn new(initial: ScalarField, config: SolverConfig, n_steps: usize) -> Self {
        Self {
            config,
            n_steps,
            initial,
            clamp_renormalize: false,
            frame_stride: 0,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.n_steps == 0 {
            return Err(FlowError::NoSteps);
        }
        self.config
            .validate()
            .map_err(|source| FlowError::Step { step: 0, source })?;
        if self.initial.min() < -grid::MOBILITY_TOL {
            return Err(FlowError::InvalidInitial(format!(
                "density has negative value {:e}",
                self.initial.min()
            )));
        }
        if !(self.initial.sum() > 0.0) {
            return Err(FlowError::InvalidInitial("density has zero mass".into()));
        }
        Ok(())
    }
}

/// Per-time-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Index of the state this record describes (1 after the first step).
    pub step: usize,
    /// `h^2 * sum(U)`.
    pub mass: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub inner_iterations: usize,
    pub converged: bool,
    pub rel_update_final: f64,
    pub max_constraint_violation: f64,
    /// `||U_{n+1} - U_n||_2`.
    pub l2_change: f64,
    /// `||-grad U - H(P)/eps||_inf` at the end of the inner solve.
    pub dual_residual: f64,
    /// `||grad U||_inf`.
    pub grad_sup: f64,
}

impl StepDiagnostics {
    pub const CSV_HEADER: &'static str =
        "step,mass,min_u,max_u,inner_iterations,converged,rel_update,max_constraint_violation,l2_change";

    /// One CSV record matching [`Self::CSV_HEADER`]. Floats use Rust's
    /// shortest round-trip formatting.
    pub fn csv_record(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{},{:e},{:e},{:e}",
            self.step,
            self.mass,
            self.min_u,
            self.max_u,
            self.inner_iterations,
            self.converged,
            self.rel_update_final,
            self.max_constraint_violation,
            self.l2_change
        )
    }
}

/// Receives diagnostics and frames from [`evolve`], always on the calling
/// thread.
pub trait FlowSink {
    fn on_step(&mut self, _diag: &StepDiagnostics, _u: &ScalarField, _p: &VectorField) -> Result<(), SinkError> {
        Ok(())
    }

    fn on_frame(&mut self, _step: usize, _u: &ScalarField) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Sink that discards everything.
pub struct NullSink;

impl FlowSink for NullSink {}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub final_state: ScalarField,
    pub final_dual: VectorField,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Inner reports in step order.
    pub inner_reports: Vec<InnerReport>,
}

impl FlowOutcome {
    pub fn total_newton_iterations(&self) -> usize {
        self.diagnostics.iter().map(|d| d.inner_iterations).sum()
    }
}

fn clamp_and_renormalize(u: &ScalarField, target_sum: f64) -> ScalarField {
    let clipped = u.map(|v| v.max(0.0));
    let s = clipped.sum();
    if s > 0.0 {
        let scale = target_sum / s;
        clipped.map(|v| v * scale)
    } else {
        clipped
    }
}

/// Evolves `run.initial` for `run.n_steps` implicit steps. The dual variable
/// starts at zero and is warm-started from the previous step afterwards.
pub fn evolve(run: &FlowRun, sink: &mut dyn FlowSink) -> Result<FlowOutcome, FlowError> {
    run.validate()?;
    let grid: Grid = run.initial.grid();
    let mut u = run.initial.clone();
    let mut p = VectorField::zeros(grid);
    let mut diagnostics = Vec::with_capacity(run.n_steps);
    let mut inner_reports = Vec::with_capacity(run.n_steps);

    if run.frame_stride > 0 {
        sink.on_frame(0, &u).map_err(|source| FlowError::Sink { step: 0, source })?;
    }
    for n in 0..run.n_steps {
        let step = n + 1;
        let sol = solve_inner(&u, &p, &run.config).map_err(|source| FlowError::Step { step, source })?;
        if run.strict && !sol.report.converged {
            return Err(FlowError::NotConverged {
                step,
                rel_update: sol.report.final_rel_update,
            });
        }
        let mut next = sol.u;
        if run.clamp_renormalize {
            next = clamp_and_renormalize(&next, u.sum());
        }
        let diff: Vec<f64> = next.values().iter().zip(u.values()).map(|(a, b)| a - b).collect();
        let diag = StepDiagnostics {
            step,
            mass: mass(&next),
            min_u: next.min(),
            max_u: next.max(),
            inner_iterations: sol.report.iterations_used,
            converged: sol.report.converged,
            rel_update_final: sol.report.final_rel_update,
            max_constraint_violation: sol.report.max_constraint_violation,
            l2_change: grid::norm2(&diff),
            dual_residual: sol.report.final_nonlinear_residual,
            grad_sup: grid::grad(&next).norm_inf(),
        };
        sink.on_step(&diag, &next, &sol.p)
            .map_err(|source| FlowError::Sink { step, source })?;
        if run.frame_stride > 0 && step % run.frame_stride == 0 {
            sink.on_frame(step, &next)
                .map_err(|source| FlowError::Sink { step, source })?;
        }
        diagnostics.push(diag);
        inner_reports.push(sol.report);
        u = next;
        p = sol.p;
    }
    Ok(FlowOutcome {
        final_state: u,
        final_dual: p,
        diagnostics,
        inner_reports,
    })
}

/// Options for using the flow as a denoiser on arbitrary (possibly slightly
/// negative) images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDenoiseOptions {
    pub n_steps: usize,
    /// Rescale to unit mass before evolving (and back afterwards).
    pub normalize: bool,
    /// Added to the image before evolving. `None` lifts the minimum to zero
    /// when the image has negative values and adds nothing otherwise.
    pub offset: Option<f64>,
    pub clamp_renormalize: bool,
    pub strict: bool,
}

impl Default for FlowDenoiseOptions {
    fn default() -> Self {
        Self {
            n_steps: 10,
            normalize: true,
            offset: None,
            clamp_renormalize: false,
            strict: false,
        }
    }
}

/// Result of [`denoise_flow`], mapped back to the intensity range of the input.
#[derive(Debug, Clone)]
pub struct FlowDenoised {
    pub image: ScalarField,
    pub offset: f64,
    pub scale: f64,
    pub outcome: FlowOutcome,
}

/// Treats `noisy` as the initial density (after the offset and optional mass
/// normalization), evolves it and undoes both transformations.
pub fn denoise_flow(
    noisy: &ScalarField,
    config: SolverConfig,
    opts: FlowDenoiseOptions,
    sink: &mut dyn FlowSink,
) -> Result<FlowDenoised, FlowError> {
    let offset = opts.offset.unwrap_or_else(|| (-noisy.min()).max(0.0));
    let lifted = noisy.map(|v| (v + offset).max(0.0));
    let scale = if opts.normalize {
        let m = mass(&lifted);
        if !(m > 0.0) {
            return Err(FlowError::InvalidInitial("density has zero mass".into()));
        }
        1.0 / m
    } else {
        1.0
    };
    let run = FlowRun {
        config,
        n_steps: opts.n_steps,
        initial: lifted.map(|v| v * scale),
        clamp_renormalize: opts.clamp_renormalize,
        frame_stride: 0,
        strict: opts.strict,
    };
    let outcome = evolve(&run, sink)?;
    let image = outcome.final_state.map(|v| v / scale - offset);
    Ok(FlowDenoised {
        image,
        offset,
        scale,
        outcome,
    })
}
