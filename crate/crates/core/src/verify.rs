//! Numerical checks: finite-difference gradient check, duality identity,
//! Fréchet remainder order, linearity of the sensitivity map, mass balance,
//! separation, Lipschitz ratios, a 0-D ODE oracle and adjoint consistency
//! under time refinement.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{adjoint_pde_residual, solve_adjoint_with, AdjointDefect, CostSpec};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::optimize::{
    cost_and_gradient, cost_difference, project_box, projected_gradient_descent, tracking_derivative,
    variational_inequality_check, ControlBox, OptimizerOptions,
};
use crate::potentials::Proliferation;
use crate::problem::ControlProblem;
use crate::profile::Profile;
use crate::sensitivity::{remainder_from, solve_linearized, Linearization};
use crate::state::{mass_ledger, separation_report, solve_state, ControlTrajectory, ModelParams, StateTriple, Trajectory};

/// Step sizes of the finite-difference gradient check.
pub const GRADIENT_EPSILONS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Sup-norm of random gradient-check directions before adaptive enlargement.
pub const DIRECTION_SCALE: f64 = 50.0;

/// Relative finite-difference error aimed for at the largest ε.
pub const TARGET_COARSE_ERROR: f64 = 1e-6;

/// Largest enlargement of a gradient-check direction.
pub const MAX_DIRECTION_FACTOR: f64 = 100.0;

/// Sup-norm of random base controls.
pub const CONTROL_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Range(f64, f64),
}

impl Bound {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Bound::AtMost(b) => v <= b,
            Bound::AtLeast(b) => v >= b,
            Bound::Range(lo, hi) => lo <= v && v <= hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub key: String,
    pub value: f64,
    pub bound: Option<Bound>,
}

impl Measurement {
    pub fn holds(&self) -> bool {
        self.bound.is_none_or(|b| b.holds(self.value))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub inputs: String,
    pub values: Vec<Measurement>,
    /// Set when the check could not run to completion.
    pub error: Option<String>,
    pub runtime: Duration,
}

impl CheckReport {
    pub fn new(name: &str, inputs: impl Into<String>) -> Self {
        CheckReport {
            name: name.to_string(),
            inputs: inputs.into(),
            values: Vec::new(),
            error: None,
            runtime: Duration::ZERO,
        }
    }

    /// Stores a diagnostic value.
    pub fn record(&mut self, key: impl Into<String>, value: f64) {
        self.values.push(Measurement {
            key: key.into(),
            value,
            bound: None,
        });
    }

    /// Stores a value the check passes or fails on.
    pub fn require(&mut self, key: impl Into<String>, value: f64, bound: Bound) {
        self.values.push(Measurement {
            key: key.into(),
            value,
            bound: Some(bound),
        });
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.values.iter().any(|m| m.bound.is_some()) && self.values.iter().all(Measurement::holds)
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|m| m.key == key).map(|m| m.value)
    }

    /// Same measured values and verdict, ignoring runtime.
    pub fn same_outcome(&self, other: &CheckReport) -> bool {
        self.name == other.name
            && self.inputs == other.inputs
            && self.error == other.error
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.key == b.key && a.value.to_bits() == b.value.to_bits() && a.bound == b.bound)
    }

    /// One line of `key=value` tokens; bounded values carry `key.max`,
    /// `key.min` companions.
    pub fn to_record(&self) -> String {
        let mut line = format!(
            "check={} pass={} runtime_s={:.3} inputs=\"{}\"",
            self.name,
            self.passed(),
            self.runtime.as_secs_f64(),
            self.inputs
        );
        for m in &self.values {
            let _ = write!(line, " {}={:e}", m.key, m.value);
            match m.bound {
                Some(Bound::AtMost(b)) => {
                    let _ = write!(line, " {}.max={:e}", m.key, b);
                }
                Some(Bound::AtLeast(b)) => {
                    let _ = write!(line, " {}.min={:e}", m.key, b);
                }
                Some(Bound::Range(lo, hi)) => {
                    let _ = write!(line, " {}.min={:e} {}.max={:e}", m.key, lo, m.key, hi);
                }
                None => {}
            }
        }
        if let Some(e) = &self.error {
            let _ = write!(line, " error=\"{}\"", e.replace('"', "'"));
        }
        line
    }
}

pub fn reports_to_string(reports: &[CheckReport]) -> String {
    reports.iter().map(|r| r.to_record() + "\n").collect()
}

fn timed(name: &str, inputs: impl Into<String>, body: impl FnOnce(&mut CheckReport) -> Result<()>) -> CheckReport {
    let mut report = CheckReport::new(name, inputs);
    let start = Instant::now();
    if let Err(e) = body(&mut report) {
        report.error = Some(e.to_string());
    }
    report.runtime = start.elapsed();
    report
}

/// Random space-time function built from the first three Neumann cosine
/// modes per axis and in time, scaled to a given sup-norm on the sampling
/// grid.
#[derive(Debug, Clone)]
pub struct SmoothSample {
    terms: Vec<([usize; 3], usize, f64)>,
    lengths: [f64; 3],
    t_final: f64,
    scale: f64,
}

impl SmoothSample {
    pub fn new(rng: &mut impl Rng, grid: &Arc<Grid>, t_final: f64, amplitude: f64, time_dependent: bool) -> Self {
        let dim = grid.dim();
        let mut lengths = [1.0; 3];
        lengths[..dim].copy_from_slice(grid.lengths());
        let mut terms = Vec::new();
        let time_modes = if time_dependent { 3 } else { 1 };
        for m0 in 0..3 {
            for m1 in 0..if dim > 1 { 3 } else { 1 } {
                for m2 in 0..if dim > 2 { 3 } else { 1 } {
                    for k in 0..time_modes {
                        terms.push(([m0, m1, m2], k, rng.gen_range(-1.0..1.0)));
                    }
                }
            }
        }
        let mut s = SmoothSample {
            terms,
            lengths,
            t_final,
            scale: 1.0,
        };
        let mut peak: f64 = 0.0;
        for j in 0..=32 {
            let t = t_final * j as f64 / 32.0;
            for i in 0..grid.len() {
                peak = peak.max(s.eval(grid.cell_center(i), t).abs());
            }
        }
        s.scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
        s
    }

    pub fn eval(&self, x: [f64; 3], t: f64) -> f64 {
        use std::f64::consts::PI;
        let mut acc = 0.0;
        for &(m, k, c) in &self.terms {
            let mut v = c * (k as f64 * PI * t / self.t_final).cos();
            for d in 0..3 {
                if m[d] > 0 {
                    v *= (m[d] as f64 * PI * x[d] / self.lengths[d]).cos();
                }
            }
            acc += v;
        }
        self.scale * acc
    }

    pub fn field(&self, grid: &Arc<Grid>, t: f64) -> Field {
        Field::from_fn(grid, |x| self.eval(x, t))
    }

    /// Samples at the right end of each of `nt` intervals of `[0, T]`.
    pub fn control(&self, grid: &Arc<Grid>, nt: usize) -> ControlTrajectory {
        ControlTrajectory::from_fn(grid, nt, self.t_final / nt as f64, |x, t| self.eval(x, t))
    }
}

pub fn random_field(grid: &Arc<Grid>, rng: &mut impl Rng, amplitude: f64) -> Field {
    SmoothSample::new(rng, grid, 1.0, amplitude, false).field(grid, 0.0)
}

pub fn random_control(grid: &Arc<Grid>, nt: usize, t_final: f64, rng: &mut impl Rng, amplitude: f64) -> ControlTrajectory {
    SmoothSample::new(rng, grid, t_final, amplitude, true).control(grid, nt)
}

fn problem_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_pair(problem: &ControlProblem, rng: &mut ChaCha8Rng, h_scale: f64) -> (ControlTrajectory, ControlTrajectory) {
    let t = problem.params.t_final;
    let u = random_control(&problem.grid, problem.nt(), t, rng, CONTROL_SCALE);
    let h = random_control(&problem.grid, problem.nt(), t, rng, h_scale);
    (u, h)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    /// `⟨r + b₀u, h⟩` in `L²(Q)`.
    pub directional: f64,
    /// Central differences at [`GRADIENT_EPSILONS`].
    pub differences: [f64; 3],
    /// Relative errors at [`GRADIENT_EPSILONS`].
    pub errors: [f64; 3],
    pub slope: f64,
    /// Factor applied to the requested direction.
    pub direction_factor: f64,
}

fn central_difference(u: &ControlTrajectory, h: &ControlTrajectory, eps: f64, problem: &ControlProblem) -> Result<f64> {
    let (up, um) = (u.axpy(eps, h)?, u.axpy(-eps, h)?);
    let (plus, minus) = (problem.solve_state(&up)?, problem.solve_state(&um)?);
    Ok(cost_difference(&plus, &up, &minus, &um, &problem.cost)? / (2.0 * eps))
}

fn relative_error(fd: f64, exact: f64) -> f64 {
    (fd - exact).abs() / exact.abs().max(f64::MIN_POSITIVE)
}

/// Central-difference check of the reduced gradient in direction `h`.
///
/// Before measuring, `h` is enlarged (never shrunk, at most
/// [`MAX_DIRECTION_FACTOR`] times) until the relative error at the largest
/// ε is about [`TARGET_COARSE_ERROR`]; otherwise directions with a small
/// third derivative hit the gradient's own accuracy floor at the smallest ε
/// and the observed order is meaningless. Enlarging `h` only increases the
/// truncation error.
pub fn gradient_sample(u: &ControlTrajectory, h: &ControlTrajectory, problem: &ControlProblem) -> Result<GradientSample> {
    let g = cost_and_gradient(u, problem)?.gradient;
    let coarse = relative_error(central_difference(u, h, GRADIENT_EPSILONS[0], problem)?, g.inner(h)?);
    let factor = if coarse > 0.0 {
        (TARGET_COARSE_ERROR / coarse).sqrt().clamp(1.0, MAX_DIRECTION_FACTOR)
    } else {
        1.0
    };
    let h = h.scale(factor);
    let directional = g.inner(&h)?;
    let mut differences = [0.0; 3];
    let mut errors = [0.0; 3];
    for (k, &eps) in GRADIENT_EPSILONS.iter().enumerate() {
        differences[k] = central_difference(u, &h, eps, problem)?;
        errors[k] = relative_error(differences[k], directional);
    }
    Ok(GradientSample {
        directional,
        differences,
        errors,
        slope: log_slope(&GRADIENT_EPSILONS, &errors),
        direction_factor: factor,
    })
}

/// Gradient check on `pairs` seeded random `(u, h)`: relative error at
/// `ε = 1e-4` at most `1e-6`, error-vs-ε slope in `[1.8, 2.2]`.
pub fn check_gradient(problem: &ControlProblem, seed: u64, pairs: usize) -> CheckReport {
    gradient_report("gradient", problem, seed, pairs)
}

fn gradient_report(name: &str, problem: &ControlProblem, seed: u64, pairs: usize) -> CheckReport {
    timed(name, format!("seed={seed} pairs={pairs} h_scale={DIRECTION_SCALE}"), |rep| {
        let mut rng = problem_rng(seed, 1);
        let mut worst: f64 = 0.0;
        let (mut slope_min, mut slope_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut factor_max: f64 = 1.0;
        for _ in 0..pairs {
            let (u, h) = random_pair(problem, &mut rng, DIRECTION_SCALE);
            let s = gradient_sample(&u, &h, problem)?;
            worst = worst.max(s.errors[1]);
            factor_max = factor_max.max(s.direction_factor);
            slope_min = slope_min.min(s.slope);
            slope_max = slope_max.max(s.slope);
        }
        rep.require("rel_err_eps1e-4", worst, Bound::AtMost(1e-6));
        rep.require("slope_min", slope_min, Bound::Range(1.8, 2.2));
        rep.require("slope_max", slope_max, Bound::Range(1.8, 2.2));
        rep.record("direction_factor_max", factor_max);
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Duality {
    /// `Σₙ dt ⟨rₙ, hₙ⟩`
    pub lhs: f64,
    /// Tracking pairings with the linearized states.
    pub rhs: f64,
    pub relative: f64,
}

/// Compares the adjoint pairing `∫_Q r h` with the tracking pairings of the
/// linearized trajectory driven by `h`.
pub fn duality_check(u: &ControlTrajectory, h: &ControlTrajectory, problem: &ControlProblem) -> Result<Duality> {
    let traj = problem.solve_state(u)?;
    let adj = solve_adjoint_with(&traj, &problem.cost, &problem.solver, problem.defect)?;
    let r = ControlTrajectory::new(u.dt(), (1..=u.nt()).map(|n| adj.r_for_control(n).clone()).collect())?;
    let lhs = r.inner(h)?;
    let lin = solve_linearized(&traj, h, &problem.solver)?;
    let rhs = tracking_derivative(&traj, &lin, &problem.cost)?;
    let floor = 1e-14 * r.norm() * h.norm();
    let diff = (lhs - rhs).abs();
    let relative = if diff == 0.0 { 0.0 } else { diff / lhs.abs().max(rhs.abs()).max(floor) };
    Ok(Duality { lhs, rhs, relative })
}

/// Duality identity on `pairs` seeded random `(u, h)`, relative residual at
/// most `1e-9`.
pub fn check_duality(problem: &ControlProblem, seed: u64, pairs: usize) -> CheckReport {
    timed("duality", format!("seed={seed} pairs={pairs}"), |rep| {
        let mut rng = problem_rng(seed, 2);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let (u, h) = random_pair(problem, &mut rng, 1.0);
            worst = worst.max(duality_check(&u, &h, problem)?.relative);
        }
        rep.require("relative_residual", worst, Bound::AtMost(1e-9));
        Ok(())
    })
}

/// Remainder `S(u+h) − S(u) − DS(u)h` for `h` scaled over three decades;
/// slope of the remainder norm against `‖h‖` in `[1.8, 2.2]`.
pub fn check_frechet_order(problem: &ControlProblem, seed: u64) -> CheckReport {
    const SCALES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
    timed("frechet_order", format!("seed={seed} scales={SCALES:?}"), |rep| {
        let mut rng = problem_rng(seed, 3);
        let (u, dir) = random_pair(problem, &mut rng, 1.0);
        let base = problem.solve_state(&u)?;
        let lin = Linearization::build(&base, &problem.solver, Default::default(), true, false)?;
        let dir_lin = lin.solve_linearized(&dir)?;
        let mut norms = Vec::new();
        let mut remainders = Vec::new();
        for &s in &SCALES {
            let h = dir.scale(s);
            let moved = problem.solve_state(&u.axpy(1.0, &h)?)?;
            let rem = remainder_from(&base, &moved, &dir_lin.scale(s))?;
            norms.push(h.norm());
            remainders.push(rem.total());
            rep.record(format!("remainder_{s:e}"), rem.total());
        }
        rep.require("slope", log_slope(&norms, &remainders), Bound::Range(1.8, 2.2));
        Ok(())
    })
}

/// `h ≡ 0` gives exactly zero; superposition and scaling to `1e-10`.
pub fn check_linearity(problem: &ControlProblem, seed: u64) -> CheckReport {
    timed("linearity", format!("seed={seed}"), |rep| {
        let mut rng = problem_rng(seed, 4);
        let (u, h1) = random_pair(problem, &mut rng, 1.0);
        let h2 = random_control(&problem.grid, problem.nt(), problem.params.t_final, &mut rng, 1.0);
        let base = problem.solve_state(&u)?;
        let lin = Linearization::build(&base, &problem.solver, Default::default(), true, false)?;
        let zero = lin.solve_linearized(&problem.zero_control())?;
        rep.require("zero_response", zero.max_abs(), Bound::AtMost(0.0));
        let a = lin.solve_linearized(&h1)?;
        let b = lin.solve_linearized(&h2)?;
        let sum = lin.solve_linearized(&h1.axpy(1.0, &h2)?)?;
        let sup = sum.max_abs_diff(&a.add(&b)) / sum.max_abs();
        rep.require("superposition_rel", sup, Bound::AtMost(1e-10));
        let c = -2.75;
        let scaled = lin.solve_linearized(&h1.scale(c))?;
        let sc = scaled.max_abs_diff(&a.scale(c)) / scaled.max_abs();
        rep.require("scaling_rel", sc, Bound::AtMost(1e-10));
        Ok(())
    })
}

/// Controls the balance and separation checks run on: zero, both box
/// bounds and one random admissible control.
fn scenario_controls(problem: &ControlProblem, seed: u64) -> Vec<(&'static str, ControlTrajectory)> {
    let mut rng = problem_rng(seed, 5);
    let zero = problem.zero_control();
    let random = project_box(
        &random_control(&problem.grid, problem.nt(), problem.params.t_final, &mut rng, 1.0),
        &problem.bounds,
    );
    vec![
        ("zero", project_box(&zero, &problem.bounds)),
        ("lower", problem.bounds.vertex(&zero, |_, _| false)),
        ("upper", problem.bounds.vertex(&zero, |_, _| true)),
        ("random", random),
    ]
}

/// Per-step mass residual at most `10·newton_tol·|Ω|` on the scenario runs;
/// with `u ≡ 0` the total drift is at most `1e-9`.
pub fn check_mass_balance(problem: &ControlProblem, seed: u64) -> CheckReport {
    timed("mass_balance", format!("seed={seed}"), |rep| {
        let tol = 10.0 * problem.solver.newton_tol * problem.grid.measure();
        let mut worst: f64 = 0.0;
        for (name, u) in scenario_controls(problem, seed) {
            let traj = problem.solve_state(&u)?;
            let ledger = mass_ledger(&traj, &u);
            rep.record(format!("residual_{name}"), ledger.max_residual());
            worst = worst.max(ledger.max_residual());
        }
        rep.require("residual_max", worst, Bound::AtMost(tol));
        let zero = problem.zero_control();
        let ledger = mass_ledger(&problem.solve_state(&zero)?, &zero);
        rep.require("drift_zero_control", ledger.drift.abs(), Bound::AtMost(1e-9));
        Ok(())
    })
}

/// Separation margin above `0.05` at every step on the scenario runs.
pub fn check_separation(problem: &ControlProblem, seed: u64) -> CheckReport {
    timed("separation", format!("seed={seed}"), |rep| {
        let mut worst = f64::INFINITY;
        for (name, u) in scenario_controls(problem, seed) {
            let traj = problem.solve_state(&u)?;
            let sep = separation_report(&traj, &problem.params.potential);
            rep.record(format!("margin_{name}"), sep.margin);
            worst = worst.min(sep.margin);
        }
        rep.require("margin_min", worst, Bound::AtLeast(0.05));
        Ok(())
    })
}

fn sup_h(fields: &[Field]) -> f64 {
    fields.iter().map(Field::norm).fold(0.0, f64::max)
}

fn sup_v(fields: &[Field]) -> f64 {
    fields.iter().map(Field::h1_norm).fold(0.0, f64::max)
}

fn l2_h(fields: &[Field], dt: f64) -> f64 {
    (dt * fields[1..].iter().map(Field::norm_sq).sum::<f64>()).sqrt()
}

fn l2_v(fields: &[Field], dt: f64) -> f64 {
    (dt * fields[1..].iter().map(|f| f.norm_sq() + f.grad_norm_sq()).sum::<f64>()).sqrt()
}

fn h1_h(fields: &[Field], dt: f64) -> f64 {
    let derivative: f64 = fields.windows(2).map(|w| (&w[1] - &w[0]).norm_sq()).sum::<f64>() / dt;
    (l2_h(fields, dt).powi(2) + derivative).sqrt()
}

/// Continuous-dependence quotients for one pair of controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzRatios {
    /// Dual-norm combination plus the `μ`, `φ`, `σ` norms, over `‖u₁ − u₂‖`.
    pub first: f64,
    /// Improved `μ` and `φ` norms, over `‖u₁ − u₂‖`.
    pub improved: f64,
    /// `‖σ₁ − σ₂‖` in `L^∞(H) ∩ L²(V)`, over `‖u₁ − u₂‖`.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzTable {
    pub full: LipschitzRatios,
    /// Same quotients for `(u₁, (u₁ + u₂)/2)`.
    pub half: LipschitzRatios,
}

fn lipschitz_ratios(a: &Trajectory, b: &Trajectory, du: f64, alpha: f64, riesz_tol: f64) -> Result<LipschitzRatios> {
    let dt = a.params.dt();
    let diff = |pick: fn(&StateTriple) -> &Field| -> Vec<Field> {
        a.states.iter().zip(&b.states).map(|(x, y)| pick(x) - pick(y)).collect()
    };
    let dmu = diff(|s| &s.mu);
    let dphi = diff(|s| &s.phi);
    let dsig = diff(|s| &s.sigma);
    let mut combo: f64 = 0.0;
    for n in 0..dmu.len() {
        let c = &(&dmu[n].scale(alpha) + &dphi[n]) + &dsig[n];
        combo = combo.max(c.dual_norm(riesz_tol)?);
    }
    let sigma = sup_h(&dsig) + l2_v(&dsig, dt);
    let first = combo + l2_h(&dmu, dt) + sup_h(&dphi) + l2_v(&dphi, dt) + sigma;
    let improved = sup_h(&dmu) + l2_v(&dmu, dt) + h1_h(&dphi, dt) + sup_v(&dphi);
    Ok(LipschitzRatios {
        first: first / du,
        improved: improved / du,
        sigma: sigma / du,
    })
}

/// Continuous-dependence quotients for `(u₁, u₂)` and for the halved
/// perturbation `(u₁, (u₁ + u₂)/2)`.
pub fn lipschitz_check(u1: &ControlTrajectory, u2: &ControlTrajectory, problem: &ControlProblem) -> Result<LipschitzTable> {
    let alpha = problem.params.alpha;
    let tol = problem.solver.riesz_tol;
    let mid = u1.axpy(1.0, u2)?.scale(0.5);
    let t1 = problem.solve_state(u1)?;
    let t2 = problem.solve_state(u2)?;
    let tm = problem.solve_state(&mid)?;
    Ok(LipschitzTable {
        full: lipschitz_ratios(&t1, &t2, u1.axpy(-1.0, u2)?.norm(), alpha, tol)?,
        half: lipschitz_ratios(&t1, &tm, u1.axpy(-1.0, &mid)?.norm(), alpha, tol)?,
    })
}

/// `‖σ‖_{L^∞(H) ∩ L²(V)} / ‖f‖` for the implicit Euler heat equation
/// `σ' − Δσ = f`, `σ(0) = 0`, solved by conjugate gradients.
pub fn heat_response_ratio(f: &ControlTrajectory) -> Result<f64> {
    let grid = f.grid().clone();
    let dt = f.dt();
    let n = grid.len();
    let apply = |x: &[f64], y: &mut [f64]| {
        grid.laplacian_into(x, y);
        for i in 0..n {
            y[i] = x[i] / dt - y[i];
        }
    };
    let mut states = vec![Field::zeros(&grid)];
    for k in 1..=f.nt() {
        let prev = states[k - 1].values();
        let b: Vec<f64> = (0..n).map(|i| prev[i] / dt + f.at(k).values()[i]).collect();
        states.push(Field::from_vec(&grid, conjugate_gradient(&apply, &b, 1e-13)?));
    }
    Ok((sup_h(&states) + l2_v(&states, dt)) / f.norm())
}

fn conjugate_gradient(apply: &dyn Fn(&[f64], &mut [f64]), b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for it in 0..10 * n + 10 {
        if rr.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let a = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        let rr_new = dot(&r, &r);
        for i in 0..n {
            p[i] = r[i] + rr_new / rr * p[i];
        }
        rr = rr_new;
        if it == 10 * n + 9 {
            break;
        }
    }
    Err(Error::LinearSolver {
        iterations: 10 * n + 10,
        residual: rr.sqrt() / bnorm,
        step: None,
    })
}

/// Lipschitz quotients on three seeded pairs: finite, and stable under
/// halving the perturbation. With `P ≡ 0` the `σ` quotient is compared with
/// a standalone heat solve.
pub fn check_lipschitz(problem: &ControlProblem, seed: u64) -> CheckReport {
    timed("lipschitz", format!("seed={seed} pairs=3"), |rep| {
        let mut rng = problem_rng(seed, 6);
        let t = problem.params.t_final;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut finite = 1.0;
        let mut pairs = Vec::new();
        for k in 0..3 {
            let u1 = project_box(&random_control(&problem.grid, problem.nt(), t, &mut rng, CONTROL_SCALE), &problem.bounds);
            let du = random_control(&problem.grid, problem.nt(), t, &mut rng, 0.3);
            let u2 = project_box(&u1.axpy(1.0, &du)?, &problem.bounds);
            let table = lipschitz_check(&u1, &u2, problem)?;
            for (name, full, half) in [
                ("first", table.full.first, table.half.first),
                ("improved", table.full.improved, table.half.improved),
            ] {
                if !(full.is_finite() && half.is_finite()) {
                    finite = 0.0;
                }
                let q = half / full;
                rep.record(format!("{name}_{k}"), full);
                lo = lo.min(q);
                hi = hi.max(q);
            }
            pairs.push((u1, u2));
        }
        rep.require("all_finite", finite, Bound::AtLeast(1.0));
        rep.require("halving_quotient_min", lo, Bound::Range(0.5, 2.0));
        rep.require("halving_quotient_max", hi, Bound::Range(0.5, 2.0));

        let mut decoupled = problem.clone();
        decoupled.params.prolif = Proliferation::Constant { p0: 0.0 };
        let mut worst: f64 = 0.0;
        for (u1, u2) in &pairs {
            let table = lipschitz_check(u1, u2, &decoupled)?;
            let heat = heat_response_ratio(&u1.axpy(-1.0, u2)?)?;
            worst = worst.max((table.full.sigma - heat).abs() / heat);
        }
        rep.require("heat_oracle_rel_diff", worst, Bound::AtMost(0.1));
        Ok(())
    })
}

/// Right-hand side of the spatially homogeneous system
/// `αμ' + φ' = P(φ)(σ − μ)`, `μ = βφ' + F'(φ)`, `σ' = −P(φ)(σ − μ) + u`,
/// solved for `(μ', φ', σ')`.
fn ode_rhs(params: &ModelParams, y: [f64; 3], u: f64) -> Result<[f64; 3]> {
    let [mu, phi, sigma] = y;
    let dphi = (mu - params.potential.f1(phi)?) / params.beta;
    let exchange = params.prolif.eval(phi, 0) * (sigma - mu);
    Ok([(exchange - dphi) / params.alpha, dphi, -exchange + u])
}

/// RK4 integration of the homogeneous reduction with `substeps` steps per
/// control interval; `u[n-1]` acts on `(t_{n−1}, t_n]`. Returns the values at
/// nodes `0..=nt` as `[μ, φ, σ]`.
pub fn ode_oracle(params: &ModelParams, y0: [f64; 3], u: &[f64], substeps: usize) -> Result<Vec<[f64; 3]>> {
    let h = params.dt() / substeps as f64;
    let shift = |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    let mut y = y0;
    let mut out = vec![y];
    for &un in u {
        for _ in 0..substeps {
            let k1 = ode_rhs(params, y, un)?;
            let k2 = ode_rhs(params, shift(y, k1, 0.5 * h), un)?;
            let k3 = ode_rhs(params, shift(y, k2, 0.5 * h), un)?;
            let k4 = ode_rhs(params, shift(y, k3, h), un)?;
            for c in 0..3 {
                y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Max-abs error between a homogeneous PDE run and `reference`, relative to
/// the largest reference value.
fn homogeneous_error(params: &ModelParams, grid: &Arc<Grid>, y0: [f64; 3], u: f64, reference: &[[f64; 3]], opts: &crate::state::SolverOptions) -> Result<f64> {
    let initial = StateTriple::constant(grid, y0[0], y0[1], y0[2]);
    let control = ControlTrajectory::constant(grid, params.nt, params.dt(), u);
    let traj = solve_state(&initial, &control, params, opts)?;
    let mut err: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for (s, r) in traj.states.iter().zip(reference) {
        for (field, &v) in [&s.mu, &s.phi, &s.sigma].into_iter().zip(r) {
            peak = peak.max(v.abs());
            err = err.max(field.values().iter().map(|x| (x - v).abs()).fold(0.0, f64::max));
        }
    }
    Ok(err / peak)
}

/// Homogeneous runs against the RK4 reduction at the problem's step size.
///
/// The main comparison starts on the slow manifold (`μ₀ = F'(φ₀)`,
/// `σ₀ = μ₀`) under a small constant supply, where implicit Euler is accurate
/// to `1e-4`. A generic start is used to confirm first-order convergence of
/// the PDE solver towards the reference.
pub fn check_ode_oracle(problem: &ControlProblem) -> CheckReport {
    const SUBSTEPS: usize = 100;
    let params = &problem.params;
    let phi0 = if params.potential.admissible(0.3) { 0.3 } else { 0.0 };
    timed(
        "ode_oracle",
        format!("phi0={phi0} u=0.05 dt={:e} substeps={SUBSTEPS}", params.dt()),
        |rep| {
            let grid = Arc::new(Grid::line(4, 1.0)?);
            let mu0 = params.potential.f1(phi0)?;
            let y0 = [mu0, phi0, mu0];
            let u = vec![0.05; params.nt];
            let reference = ode_oracle(params, y0, &u, SUBSTEPS)?;
            let finer = ode_oracle(params, y0, &u, 2 * SUBSTEPS)?;
            let self_err = reference
                .iter()
                .zip(&finer)
                .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
                .fold(0.0, f64::max);
            rep.require("rk4_self_convergence", self_err, Bound::AtMost(1e-10));
            let rel = homogeneous_error(params, &grid, y0, 0.05, &reference, &problem.solver)?;
            rep.require("relative_error", rel, Bound::AtMost(1e-4));

            // generic start: first-order convergence under step halving
            let y1 = [0.0, phi0, 0.5];
            let u1 = vec![0.2; params.nt];
            let coarse_ref = ode_oracle(params, y1, &u1, SUBSTEPS)?;
            let coarse = homogeneous_error(params, &grid, y1, 0.2, &coarse_ref, &problem.solver)?;
            let fine_params = ModelParams {
                nt: 2 * params.nt,
                ..params.clone()
            };
            let fine_ref = ode_oracle(&fine_params, y1, &vec![0.2; 2 * params.nt], SUBSTEPS)?;
            let fine = homogeneous_error(&fine_params, &grid, y1, 0.2, &fine_ref, &problem.solver)?;
            rep.record("generic_relative_error", coarse);
            rep.require("generic_order", (coarse / fine).log2(), Bound::Range(0.8, 1.2));
            Ok(())
        },
    )
}

/// The same problem on `nt` time steps; time series are re-sampled.
pub fn refine_in_time(problem: &ControlProblem, nt: usize) -> ControlProblem {
    let mut p = problem.clone();
    p.params.nt = nt;
    let c = &mut p.cost;
    for prof in [
        &mut c.phi_q,
        &mut c.phi_omega,
        &mut c.sigma_q,
        &mut c.sigma_omega,
        &mut c.mu_q,
        &mut c.mu_omega,
        &mut p.bounds.lower,
        &mut p.bounds.upper,
    ] {
        *prof = prof.resample(nt);
    }
    p
}

/// Residual of the continuous adjoint equations along a seeded smooth
/// control at `nt`, `2nt`, `4nt` steps; the observed order under each
/// halving of `dt` must lie in `[0.8, 1.2]`.
pub fn check_adjoint_refinement(problem: &ControlProblem, seed: u64) -> CheckReport {
    timed("adjoint_refinement", format!("seed={seed} levels=3"), |rep| {
        let mut rng = problem_rng(seed, 7);
        let sample = SmoothSample::new(&mut rng, &problem.grid, problem.params.t_final, CONTROL_SCALE, true);
        let mut residuals = Vec::new();
        for level in 0..3 {
            let p = refine_in_time(problem, problem.nt() << level);
            let u = sample.control(&p.grid, p.nt());
            let traj = p.solve_state(&u)?;
            let adj = solve_adjoint_with(&traj, &p.cost, &p.solver, p.defect)?;
            let res = adjoint_pde_residual(&adj, &traj, &p.cost, false)?.total();
            rep.record(format!("residual_nt{}", p.nt()), res);
            residuals.push(res);
        }
        for k in 0..2 {
            rep.require(format!("order_{k}"), (residuals[k] / residuals[k + 1]).log2(), Bound::Range(0.8, 1.2));
        }
        Ok(())
    })
}

/// Cost with the chemical-potential tracking terms switched on.
pub fn with_mu_tracking(cost: &CostSpec) -> CostSpec {
    CostSpec {
        b5: if cost.b5 > 0.0 { cost.b5 } else { 1.0 },
        b6: if cost.b6 > 0.0 { cost.b6 } else { 1.0 },
        ..cost.clone()
    }
}

/// Gradient check with `b₅, b₆ > 0`.
pub fn check_mu_tracking_gradient(problem: &ControlProblem, seed: u64, pairs: usize) -> CheckReport {
    gradient_report("gradient_mu_tracking", &problem.with_cost(with_mu_tracking(&problem.cost)), seed, pairs)
}

/// Runs the gradient and duality checks with deliberate adjoint defects;
/// passes only if every defect makes both of them fail.
pub fn check_mutation(problem: &ControlProblem, seed: u64, pairs: usize) -> CheckReport {
    timed("mutation", format!("seed={seed} pairs={pairs}"), |rep| {
        let mut base = problem.clone();
        if base.cost.b3 == 0.0 {
            base.cost.b3 = 1.0;
        }
        for (name, defect) in [
            ("flip_sigma_source", AdjointDefect::FlipSigmaSource),
            ("drop_curvature", AdjointDefect::DropPotentialCurvature),
        ] {
            let mut p = base.clone();
            p.defect = defect;
            let g = check_gradient(&p, seed, pairs);
            let d = check_duality(&p, seed, pairs);
            rep.require(format!("{name}_gradient_fails"), f64::from(!g.passed()), Bound::AtLeast(1.0));
            rep.require(format!("{name}_duality_fails"), f64::from(!d.passed()), Bound::AtLeast(1.0));
        }
        Ok(())
    })
}

/// `u†(x, t) = 0.2 + 0.4 cos(π x₁/L₁)(1 + 2t)`, the reference control of the
/// manufactured problem.
pub fn default_manufactured_control(grid: &Arc<Grid>, nt: usize, t_final: f64) -> ControlTrajectory {
    let l = grid.lengths()[0];
    ControlTrajectory::from_fn(grid, nt, t_final / nt as f64, |x, t| {
        0.2 + 0.4 * (std::f64::consts::PI * x[0] / l).cos() * (1.0 + 2.0 * t)
    })
}

/// Replaces the targets of `base` by the states reached under `u_dagger`
/// and sets `b₀ = 0`, so `u_dagger` is a global minimiser with `J̃ = 0`.
/// Tracking weights that are zero in `base` are set to one.
pub fn manufactured_problem(base: &ControlProblem, u_dagger: &ControlTrajectory) -> Result<ControlProblem> {
    let traj = base.solve_state(u_dagger)?;
    let series = |pick: fn(&StateTriple) -> &Field| Profile::Series(traj.states.iter().map(|s| pick(s).clone()).collect());
    let last = traj.final_state();
    let w = |b: f64| if b > 0.0 { b } else { 1.0 };
    let c = &base.cost;
    let cost = CostSpec {
        b0: 0.0,
        b1: w(c.b1),
        b2: w(c.b2),
        b3: w(c.b3),
        b4: w(c.b4),
        b5: w(c.b5),
        b6: w(c.b6),
        phi_q: series(|s| &s.phi),
        sigma_q: series(|s| &s.sigma),
        mu_q: series(|s| &s.mu),
        phi_omega: Profile::Field(last.phi.clone()),
        sigma_omega: Profile::Field(last.sigma.clone()),
        mu_omega: Profile::Field(last.mu.clone()),
    };
    Ok(base.with_cost(cost))
}

/// Largest possible variational-inequality pairing at `u`:
/// `‖r + b₀u‖ · ‖u^* − u_*‖`.
pub fn pairing_scale(g: &ControlTrajectory, bounds: &ControlBox) -> Result<f64> {
    let lower = bounds.vertex(g, |_, _| false);
    let upper = bounds.vertex(g, |_, _| true);
    Ok(g.norm() * upper.axpy(-1.0, &lower)?.norm())
}

/// Projected gradient descent on a manufactured problem from the box
/// midpoint: monotone cost, `J̃ ≤ 1e-8` within the iteration budget, and
/// the sampled variational inequality at the final iterate at least
/// `−1e-8` times the initial pairing scale.
pub fn check_optimizer(problem: &ControlProblem, u_dagger: &ControlTrajectory, opts: &OptimizerOptions, seed: u64) -> CheckReport {
    timed("optimizer", format!("seed={seed} max_iters={} rule={:?}", opts.max_iters, opts.step_rule), |rep| {
        let u0 = problem.bounds.midpoint(&problem.grid, problem.nt(), problem.dt());
        let g0 = cost_and_gradient(&u0, problem)?.gradient;
        let scale = pairing_scale(&g0, &problem.bounds)?;
        let result = projected_gradient_descent(&u0, problem, opts)?;
        let hist = &result.cost_history;
        let increases = hist.windows(2).filter(|w| w[1] > w[0]).count();
        rep.require("cost_increases", increases as f64, Bound::AtMost(0.0));
        rep.require("final_cost", result.final_cost(), Bound::AtMost(1e-8));
        let reached = hist.iter().position(|&j| j <= 1e-8).map_or(f64::INFINITY, |k| k as f64);
        rep.require("iterations_to_1e-8", reached, Bound::AtMost(opts.max_iters as f64));
        rep.record("iterations", result.iterations as f64);
        rep.record("final_stationarity", result.final_stationarity());
        rep.record("distance_to_reference", result.u_opt.axpy(-1.0, u_dagger)?.norm());
        let vi = variational_inequality_check(&result.u_opt, problem, 16, seed)?;
        rep.record("pairing_scale", scale);
        rep.record("vi_min", vi.min_pairing);
        rep.require("vi_min_scaled", vi.min_pairing / scale, Bound::AtLeast(-1e-8));
        rep.require("vi_form_gap", vi.max_relative_gap, Bound::AtMost(1e-8));
        Ok(())
    })
}

/// Number of random pairs used by the gradient and duality checks.
pub const CHECK_PAIRS: usize = 5;

/// All checks on `problem`, deterministic under `seed`. Failures are
/// collected in the reports, never returned as errors.
pub fn run_all_checks(problem: &ControlProblem, seed: u64) -> Vec<CheckReport> {
    vec![
        check_gradient(problem, seed, CHECK_PAIRS),
        check_duality(problem, seed, CHECK_PAIRS),
        check_frechet_order(problem, seed),
        check_linearity(problem, seed),
        check_mass_balance(problem, seed),
        check_separation(problem, seed),
        check_lipschitz(problem, seed),
        check_ode_oracle(problem),
        check_adjoint_refinement(problem, seed),
        check_mu_tracking_gradient(problem, seed, CHECK_PAIRS),
    ]
}

/// The full suite: every check of [`run_all_checks`] plus the mutation
/// check and the optimizer on `manufactured`, one thread per check. The
/// reports come back in a fixed order and do not depend on scheduling.
pub fn run_suite(
    problem: &ControlProblem,
    manufactured: &ControlProblem,
    u_dagger: &ControlTrajectory,
    opts: &OptimizerOptions,
    seed: u64,
) -> Vec<CheckReport> {
    type Job<'a> = Box<dyn FnOnce() -> CheckReport + Send + 'a>;
    let jobs: Vec<Job> = vec![
        Box::new(move || check_gradient(problem, seed, CHECK_PAIRS)),
        Box::new(move || check_duality(problem, seed, CHECK_PAIRS)),
        Box::new(move || check_frechet_order(problem, seed)),
        Box::new(move || check_linearity(problem, seed)),
        Box::new(move || check_mass_balance(problem, seed)),
        Box::new(move || check_separation(problem, seed)),
        Box::new(move || check_lipschitz(problem, seed)),
        Box::new(move || check_ode_oracle(problem)),
        Box::new(move || check_adjoint_refinement(problem, seed)),
        Box::new(move || check_mu_tracking_gradient(problem, seed, CHECK_PAIRS)),
        Box::new(move || check_optimizer(manufactured, u_dagger, opts, seed)),
        Box::new(move || check_mutation(problem, seed, CHECK_PAIRS)),
    ];
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|job| s.spawn(job)).collect();
        handles.into_iter().map(|h| h.join().expect("check thread panicked")).collect()
    })
}
