//! Command-line front end.
//!
//! Parameter precedence is flags > `--config` file > built-in defaults. Every
//! command records the resolved parameters in a flat `key=value` manifest,
//! which can be passed back through `--config` to repeat the run.
//!
//! Exit codes: 0 success, 1 usage, 2 solver failure, 3 I/O.

use crate::flow::{self, denoise_flow, FlowDenoiseOptions, FlowError, FlowRun, FlowSink, SinkError, StepDiagnostics};
use crate::grid::{self, ScalarField, VectorField};
use crate::imaging::{self, read_image, write_image, ImageBuffer, ImageError};
use crate::linalg::{LinearSettings, SolveMethod};
use crate::newton::{NewtonError, SolverConfig};
use crate::tv::{denoise_tv, sloped_mask, staircase_metric, staircase_metric_masked, TvDenoiseConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Manifest keys that describe a run rather than parameterize it.
const META_KEYS: &[&str] = &["command", "tool_version", "duration_secs"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Shape(_) | ImageError::Grid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::InvalidInitial(_) | FlowError::NoSteps => CliError::Usage(e.to_string()),
            FlowError::Step {
                source: NewtonError::InvalidConfig(_),
                ..
            } => CliError::Usage(e.to_string()),
            FlowError::Sink { .. } => CliError::Io(e.to_string()),
            FlowError::Step { .. } | FlowError::NotConverged { .. } => CliError::Solver(e.to_string()),
        }
    }
}

impl From<NewtonError> for CliError {
    fn from(e: NewtonError) -> Self {
        match e {
            NewtonError::InvalidConfig(_) | NewtonError::Grid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tvwflow", version, about = "TV-Wasserstein gradient flow and TV denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom (TVWF plus a PGM preview).
    Generate(GenerateArgs),
    /// Add seeded Gaussian noise to an image.
    Noise(NoiseArgs),
    /// Evolve an image under the TV-Wasserstein flow.
    Evolve(EvolveArgs),
    /// Denoise with the flow (tvw) or the TV baseline (tv).
    Denoise(DenoiseArgs),
    /// Print `psnr,l2,mass_a,mass_b,tv_a,tv_b` for two images (b is the reference).
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    Square,
    Pyramid,
    Cartoon,
}

impl FromStr for PhantomKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as ValueEnum>::from_str(s, false)
    }
}

impl Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenoiseMethod {
    Tvw,
    Tv,
}

impl FromStr for DenoiseMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as ValueEnum>::from_str(s, false)
    }
}

impl Display for DenoiseMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub kind: Option<PhantomKind>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Square value inside (square only).
    #[arg(long)]
    pub inside: Option<f64>,
    /// Square background value (square only).
    #[arg(long)]
    pub outside: Option<f64>,
    /// Output path; the PGM preview goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub variance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Scheme parameters shared by `evolve` and `denoise`.
#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Time step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Penalty weight.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Initial Newton damping.
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long)]
    pub tau_decay: Option<f64>,
    #[arg(long)]
    pub tau_min: Option<f64>,
    /// Relative-update tolerance of the inner Newton iteration.
    #[arg(long)]
    pub eps_tol: Option<f64>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub tol_lin: Option<f64>,
    /// Linear solver: direct or iterative.
    #[arg(long)]
    pub solver: Option<SolveMethod>,
    /// Grid spacing.
    #[arg(long)]
    pub h: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Write a frame every N steps (0 disables frames).
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Evolve the raw input instead of rescaling it to unit mass.
    #[arg(long)]
    pub no_normalize: bool,
    /// Abort (exit code 2) when an inner Newton solve does not converge.
    #[arg(long)]
    pub strict: bool,
    /// Clip negative values after each step and restore the mass.
    #[arg(long)]
    pub clamp_renormalize: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<DenoiseMethod>,
    /// TV regularization weight (tv).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of flow steps (tvw).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Intensity offset added before evolving (tvw); defaults to lifting the
    /// minimum to zero.
    #[arg(long)]
    pub offset: Option<f64>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Clean image for PSNR.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,
}

/// Flat `key=value` record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("tool_version", TOOL_VERSION);
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut m = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", lineno + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_text()).map_err(|e| io_error(path, e))
    }
}

/// Resolves parameters from flags, an optional config file and defaults, and
/// records the outcome in the manifest.
struct Resolver {
    config: BTreeMap<String, String>,
    manifest: RunManifest,
}

impl Resolver {
    fn new(command: &str, config: Option<&Path>) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let parsed = RunManifest::parse(&text)?;
            if let Some(cmd) = parsed.get("command") {
                if cmd != command {
                    return Err(CliError::Usage(format!(
                        "config {} was written by '{cmd}', not '{command}'",
                        path.display()
                    )));
                }
            }
            for (k, v) in parsed.entries {
                if !META_KEYS.contains(&k.as_str()) {
                    map.insert(k, v);
                }
            }
        }
        Ok(Self {
            config: map,
            manifest: RunManifest::new(command),
        })
    }

    fn lookup<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_config = self.config.remove(key);
        let value = match flag {
            Some(v) => Some(v),
            None => match from_config {
                Some(text) => Some(
                    text.parse::<T>()
                        .map_err(|e| CliError::Usage(format!("config key '{key}': {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.manifest.set(key, v);
        }
        Ok(value)
    }

    fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.manifest.set(key, &v);
        Ok(v)
    }

    fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.lookup(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required parameter --{}", key.replace('_', "-"))))
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self
            .lookup(key, flag.map(|p| p.display().to_string()))?
            .map(PathBuf::from))
    }

    fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required parameter --{}", key.replace('_', "-"))))
    }

    /// Boolean switches: a present flag wins, otherwise the config value.
    fn switch(&mut self, key: &str, flag: bool, default: bool) -> Result<bool, CliError> {
        self.value(key, flag.then_some(!default), default)
    }

    fn finish(mut self) -> Result<RunManifest, CliError> {
        if let Some(k) = self.config.keys().next() {
            return Err(CliError::Usage(format!("unknown config key '{k}'")));
        }
        self.manifest.entries.sort_by(|a, b| {
            let rank = |k: &str| META_KEYS.iter().position(|m| *m == k).unwrap_or(usize::MAX);
            rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0))
        });
        Ok(std::mem::take(&mut self.manifest))
    }
}

struct ResolvedSolver {
    config: SolverConfig,
    h: f64,
}

fn resolve_solver(r: &mut Resolver, a: &SolverArgs, eps_default: f64) -> Result<ResolvedSolver, CliError> {
    let defaults = SolverConfig::default();
    let lin = LinearSettings::default();
    let config = SolverConfig {
        dt: r.value("dt", a.dt, defaults.dt)?,
        eps: r.value("eps", a.eps, eps_default)?,
        tau0: r.value("tau0", a.tau0, defaults.tau0)?,
        tau_decay: r.value("tau_decay", a.tau_decay, defaults.tau_decay)?,
        tau_min: r.value("tau_min", a.tau_min, defaults.tau_min)?,
        eps_tol: r.value("eps_tol", a.eps_tol, defaults.eps_tol)?,
        max_inner: r.value("max_inner", a.max_inner, defaults.max_inner)?,
        linear: LinearSettings {
            method: r.value("solver", a.solver, lin.method)?,
            tol: r.value("tol_lin", a.tol_lin, lin.tol)?,
            ..lin
        },
    };
    config.validate()?;
    let h = r.value("h", a.h, 1.0)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(CliError::Usage(format!("h must be positive, got {h}")));
    }
    Ok(ResolvedSolver { config, h })
}

fn load_field(path: &Path, h: f64) -> Result<ScalarField, CliError> {
    Ok(read_image(path)?.to_field(h)?)
}

/// Writes `<stem>.tvwf` (lossless) and `<stem>.pgm` (preview, divided by
/// `preview_scale` and clamped to `[0, 1]`).
fn write_field_pair(u: &ScalarField, tvwf_path: &Path, preview_scale: f64) -> Result<(), CliError> {
    let buf = ImageBuffer::from_field(u);
    write_image(&buf, &tvwf_path.with_extension("tvwf"))?;
    let s = if preview_scale > 0.0 { preview_scale } else { 1.0 };
    let preview = ImageBuffer::new(buf.width, buf.height, buf.pixels.iter().map(|v| v / s).collect())?;
    write_image(&preview, &tvwf_path.with_extension("pgm"))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn manifest_path_for(out: &Path) -> PathBuf {
    out.with_extension("manifest.txt")
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut r = Resolver::new("generate", a.config.as_deref())?;
    let kind = r.required("kind", a.kind)?;
    let n = r.value("n", a.n, 100)?;
    if n < 8 {
        return Err(CliError::Usage(format!("n must be at least 8, got {n}")));
    }
    let field = match kind {
        PhantomKind::Square => {
            let inside = r.value("inside", a.inside, 1.0)?;
            let outside = r.value("outside", a.outside, 0.0)?;
            imaging::gen_square(n, inside, outside)
        }
        PhantomKind::Pyramid => imaging::gen_pyramid(n),
        PhantomKind::Cartoon => imaging::gen_cartoon(n),
    };
    let out = r.required_path("out", a.out)?;
    let mut manifest = r.finish()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_field_pair(&field, &out, 1.0)?;
    manifest.set("duration_secs", start.elapsed().as_secs_f64());
    manifest.write(&manifest_path_for(&out))
}

fn cmd_noise(a: NoiseArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut r = Resolver::new("noise", a.config.as_deref())?;
    let input = r.required_path("input", a.input)?;
    let variance = r.required("variance", a.variance)?;
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(CliError::Usage(format!("variance must be non-negative, got {variance}")));
    }
    let seed = r.value("seed", a.seed, 0u64)?;
    let out = r.required_path("out", a.out)?;
    let mut manifest = r.finish()?;
    let field = load_field(&input, 1.0)?;
    let noisy = imaging::add_gaussian_noise(&field, variance, seed);
    write_image(&ImageBuffer::from_field(&noisy), &out)?;
    manifest.set("duration_secs", start.elapsed().as_secs_f64());
    manifest.write(&manifest_path_for(&out))
}

/// Writes `diagnostics.csv` and strided frames into an output directory.
pub struct DirectorySink {
    dir: PathBuf,
    csv: BufWriter<File>,
    preview_scale: f64,
}

impl DirectorySink {
    pub fn create(dir: &Path, preview_scale: f64) -> Result<Self, CliError> {
        create_dir(dir)?;
        let path = dir.join("diagnostics.csv");
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut csv = BufWriter::new(file);
        writeln!(csv, "{}", StepDiagnostics::CSV_HEADER).map_err(|e| io_error(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            preview_scale,
        })
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.csv
            .flush()
            .map_err(|e| io_error(&self.dir.join("diagnostics.csv"), e))
    }
}

impl FlowSink for DirectorySink {
    fn on_step(&mut self, diag: &StepDiagnostics, _u: &ScalarField, _p: &VectorField) -> Result<(), SinkError> {
        writeln!(self.csv, "{}", diag.csv_record())?;
        Ok(())
    }

    fn on_frame(&mut self, step: usize, u: &ScalarField) -> Result<(), SinkError> {
        let path = self.dir.join(format!("frame_{step:06}.tvwf"));
        write_field_pair(u, &path, self.preview_scale).map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Forwards to two sinks in order.
struct Tee<'a> {
    first: &'a mut dyn FlowSink,
    second: &'a mut dyn FlowSink,
}

impl FlowSink for Tee<'_> {
    fn on_step(&mut self, diag: &StepDiagnostics, u: &ScalarField, p: &VectorField) -> Result<(), SinkError> {
        self.first.on_step(diag, u, p)?;
        self.second.on_step(diag, u, p)
    }

    fn on_frame(&mut self, step: usize, u: &ScalarField) -> Result<(), SinkError> {
        self.first.on_frame(step, u)?;
        self.second.on_frame(step, u)
    }
}

/// Summary returned by [`run_evolve`].
#[derive(Debug, Clone)]
pub struct EvolveSummary {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: flow::FlowOutcome,
}

/// Runs `evolve`; `observer` additionally sees every step (used by tests
/// that need the dual variable).
pub fn run_evolve(a: EvolveArgs, observer: &mut dyn FlowSink) -> Result<EvolveSummary, CliError> {
    let start = Instant::now();
    let mut r = Resolver::new("evolve", a.config.as_deref())?;
    let input = r.required_path("input", a.input)?;
    let steps = r.value("steps", a.steps, 100)?;
    let solver = resolve_solver(&mut r, &a.solver, SolverConfig::default().eps)?;
    let frame_stride = r.value("frame_stride", a.frame_stride, 0)?;
    let normalize = !r.switch("no_normalize", a.no_normalize, false)?;
    let strict = r.switch("strict", a.strict, false)?;
    let clamp = r.switch("clamp_renormalize", a.clamp_renormalize, false)?;
    let out_dir = r.required_path("out_dir", a.out_dir)?;
    let mut manifest = r.finish()?;

    let raw = load_field(&input, solver.h)?;
    let initial = if normalize {
        flow::normalize_mass(&raw)?
    } else {
        raw
    };
    let run = FlowRun {
        config: solver.config,
        n_steps: steps,
        initial,
        clamp_renormalize: clamp,
        frame_stride,
        strict,
    };
    let mut dir_sink = DirectorySink::create(&out_dir, run.initial.max())?;
    let result = flow::evolve(
        &run,
        &mut Tee {
            first: &mut dir_sink,
            second: observer,
        },
    );
    // Keep the diagnostics of the steps that did run, even on failure.
    dir_sink.finish()?;
    let outcome = result?;
    write_field_pair(&outcome.final_state, &out_dir.join("final.tvwf"), run.initial.max())?;
    manifest.set("duration_secs", start.elapsed().as_secs_f64());
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(EvolveSummary {
        out_dir,
        manifest,
        outcome,
    })
}

fn cmd_evolve(a: EvolveArgs) -> Result<(), CliError> {
    let s = run_evolve(a, &mut flow::NullSink)?;
    let converged = s.outcome.diagnostics.iter().filter(|d| d.converged).count();
    let last = s.outcome.diagnostics.last().expect("at least one step");
    println!(
        "time_steps={} newton_iterations={} converged_steps={} final_mass={:e} max_u={:e}",
        s.outcome.diagnostics.len(),
        s.outcome.total_newton_iterations(),
        converged,
        last.mass,
        last.max_u
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_denoise(a: DenoiseArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut r = Resolver::new("denoise", a.config.as_deref())?;
    let input = r.required_path("input", a.input)?;
    let method = r.value("method", a.method, DenoiseMethod::Tvw)?;
    let reference_path = r.path("reference", a.reference)?;
    let out_dir = r.required_path("out_dir", a.out_dir)?;
    let solver = resolve_solver(&mut r, &a.solver, 1e-5)?;
    let noisy = load_field(&input, solver.h)?;
    let reference = reference_path
        .as_deref()
        .map(|p| load_field(p, solver.h))
        .transpose()?;

    create_dir(&out_dir)?;
    let result = match method {
        DenoiseMethod::Tv => {
            let alpha = r.value("alpha", a.alpha, 0.1)?;
            let manifest = r.finish()?;
            let c = solver.config;
            let cfg = TvDenoiseConfig {
                alpha,
                eps: c.eps,
                tau0: c.tau0,
                tau_decay: c.tau_decay,
                tau_min: c.tau_min,
                eps_tol: c.eps_tol,
                max_inner: c.max_inner,
                linear: c.linear,
            };
            let sol = denoise_tv(&noisy, &cfg)?;
            if !sol.report.converged && a.strict {
                return Err(CliError::Solver(format!(
                    "TV Newton iteration did not converge (rel_update = {:e})",
                    sol.report.final_rel_update
                )));
            }
            (sol.u, manifest)
        }
        DenoiseMethod::Tvw => {
            let steps = r.value("steps", a.steps, 10)?;
            let offset = r.lookup("offset", a.offset)?;
            let normalize = !r.switch("no_normalize", a.no_normalize, false)?;
            let strict = r.switch("strict", a.strict, false)?;
            let manifest = r.finish()?;
            let opts = FlowDenoiseOptions {
                n_steps: steps,
                normalize,
                offset,
                clamp_renormalize: false,
                strict,
            };
            let mut sink = DirectorySink::create(&out_dir, 1.0)?;
            let res = denoise_flow(&noisy, solver.config, opts, &mut sink);
            sink.finish()?;
            (res?.image, manifest)
        }
    };
    let (u, mut manifest) = result;
    write_field_pair(&u, &out_dir.join("result.tvwf"), 1.0)?;

    let psnr_out = reference.as_ref().map(|c| imaging::psnr(&u, c)).transpose()?;
    let psnr_in = reference.as_ref().map(|c| imaging::psnr(&noisy, c)).transpose()?;
    let stair = match &reference {
        Some(c) => staircase_metric_masked(&u, &sloped_mask(c)).map_err(|e| CliError::Usage(e.to_string()))?,
        None => staircase_metric(&u),
    };
    let metrics = format!(
        "psnr,psnr_input,discrete_tv,staircase_metric\n{},{},{},{}\n",
        fmt_opt(psnr_out),
        fmt_opt(psnr_in),
        imaging::discrete_tv(&u),
        stair
    );
    let metrics_path = out_dir.join("metrics.csv");
    fs::write(&metrics_path, metrics).map_err(|e| io_error(&metrics_path, e))?;
    manifest.set("duration_secs", start.elapsed().as_secs_f64());
    manifest.write(&out_dir.join("manifest.txt"))
}

/// `psnr,l2,mass_a,mass_b,tv_a,tv_b` with `b` as the PSNR reference.
pub fn metrics_record(a: &ScalarField, b: &ScalarField) -> Result<String, CliError> {
    let p = imaging::psnr(a, b)?;
    let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    Ok(format!(
        "{},{},{},{},{},{}",
        p,
        grid::norm2(&diff),
        imaging::mass(a),
        imaging::mass(b),
        imaging::discrete_tv(a),
        imaging::discrete_tv(b)
    ))
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(CliError::Usage(format!("h must be positive, got {}", a.h)));
    }
    let fa = load_field(&a.a, a.h)?;
    let fb = load_field(&a.b, a.h)?;
    println!("{}", metrics_record(&fa, &fb)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Noise(a) => cmd_noise(a),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
