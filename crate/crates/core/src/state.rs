//! Forward solver for the relaxed Cahn–Hilliard/nutrient system
//!
//! ```text
//! α ∂t μ + ∂t φ − Δμ = P(φ)(σ − μ)
//! μ = β ∂t φ − Δφ + F'(φ)
//! ∂t σ − Δσ = −P(φ)(σ − μ) + u
//! ```
//!
//! with homogeneous Neumann conditions, discretised by backward Euler in
//! time. Each step is a monolithic Newton solve on the stacked unknown
//! `(μ, φ, σ)ⁿ⁺¹`; the Jacobian assembled here is reused verbatim by the
//! linearized and adjoint solvers.

use std::sync::Arc;

use crate::adjoint::CostSpec;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::linalg::{CsrMatrix, GmresOptions, LinearSystem};
use crate::optimize::ControlBox;
use crate::potentials::{Potential, Proliferation};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub alpha: f64,
    pub beta: f64,
    pub potential: Potential,
    pub prolif: Proliferation,
    pub t_final: f64,
    pub nt: usize,
}

impl ModelParams {
    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t_final * n as f64 / self.nt as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stacked residual L² norm at which Newton stops.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Step halvings allowed when a Newton trial leaves the potential domain.
    pub max_halvings: usize,
    pub linear: GmresOptions,
    pub riesz_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            newton_tol: 1e-11,
            newton_max_iter: 50,
            max_halvings: 30,
            linear: GmresOptions::default(),
            riesz_tol: crate::grid::RIESZ_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTriple {
    pub mu: Field,
    pub phi: Field,
    pub sigma: Field,
}

impl StateTriple {
    pub fn constant(grid: &Arc<Grid>, mu: f64, phi: f64, sigma: f64) -> Self {
        StateTriple {
            mu: Field::constant(grid, mu),
            phi: Field::constant(grid, phi),
            sigma: Field::constant(grid, sigma),
        }
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        StateTriple::constant(grid, 0.0, 0.0, 0.0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.phi.grid()
    }

    /// Concatenation `[μ; φ; σ]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.phi.len());
        v.extend_from_slice(self.mu.values());
        v.extend_from_slice(self.phi.values());
        v.extend_from_slice(self.sigma.values());
        v
    }

    pub(crate) fn from_stacked(grid: &Arc<Grid>, v: &[f64]) -> Self {
        let n = grid.len();
        StateTriple {
            mu: Field::from_vec(grid, v[..n].to_vec()),
            phi: Field::from_vec(grid, v[n..2 * n].to_vec()),
            sigma: Field::from_vec(grid, v[2 * n..].to_vec()),
        }
    }

    /// `∫Ω (αμ + φ + σ)`
    pub fn mass(&self, alpha: f64) -> f64 {
        alpha * self.mu.integral() + self.phi.integral() + self.sigma.integral()
    }

    pub fn is_finite(&self) -> bool {
        [&self.mu, &self.phi, &self.sigma]
            .iter()
            .all(|f| f.values().iter().all(|v| v.is_finite()))
    }
}

/// Piecewise-constant-in-time control: entry `n − 1` holds `uⁿ`, acting on
/// `(tₙ₋₁, tₙ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    dt: f64,
    values: Vec<Field>,
}

impl ControlTrajectory {
    pub fn new(dt: f64, values: Vec<Field>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("control trajectory needs at least one step".into()));
        }
        if values.iter().any(|f| !f.same_grid(&values[0])) {
            return Err(Error::Shape("control fields live on different grids".into()));
        }
        Ok(ControlTrajectory { dt, values })
    }

    pub fn constant(grid: &Arc<Grid>, nt: usize, dt: f64, c: f64) -> Self {
        ControlTrajectory {
            dt,
            values: vec![Field::constant(grid, c); nt],
        }
    }

    pub fn zeros(grid: &Arc<Grid>, nt: usize, dt: f64) -> Self {
        ControlTrajectory::constant(grid, nt, dt, 0.0)
    }

    /// Samples `f(x, tₙ)` at the right node of every interval.
    pub fn from_fn(grid: &Arc<Grid>, nt: usize, dt: f64, f: impl Fn([f64; 3], f64) -> f64) -> Self {
        let values = (1..=nt)
            .map(|n| {
                let t = n as f64 * dt;
                Field::from_fn(grid, |x| f(x, t))
            })
            .collect();
        ControlTrajectory { dt, values }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nt(&self) -> usize {
        self.values.len()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.values[0].grid()
    }

    /// `uⁿ` for `n ∈ 1..=nt`.
    pub fn at(&self, n: usize) -> &Field {
        &self.values[n - 1]
    }

    pub fn fields(&self) -> &[Field] {
        &self.values
    }

    fn check(&self, other: &ControlTrajectory) -> Result<()> {
        if self.nt() != other.nt() || !self.values[0].same_grid(&other.values[0]) {
            return Err(Error::Shape(format!(
                "control trajectories differ in shape ({} vs {} steps)",
                self.nt(),
                other.nt()
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &ControlTrajectory, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Self> {
        self.check(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.zip_map(b, f))
            .collect::<Result<_>>()?;
        Ok(ControlTrajectory { dt: self.dt, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        ControlTrajectory {
            dt: self.dt,
            values: self.values.iter().map(|v| v.map(f)).collect(),
        }
    }

    /// `self + a·other`
    pub fn axpy(&self, a: f64, other: &ControlTrajectory) -> Result<Self> {
        self.zip_map(other, |x, y| x + a * y)
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    /// Discrete `L²(Q)` inner product, right-rectangle rule in time.
    pub fn inner(&self, other: &ControlTrajectory) -> Result<f64> {
        self.check(other)?;
        let mut acc = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            acc += a.inner(b)?;
        }
        Ok(self.dt * acc)
    }

    pub fn norm(&self) -> f64 {
        (self.dt * self.values.iter().map(Field::norm_sq).sum::<f64>()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(Field::max_abs).fold(0.0, f64::max)
    }

    /// `∫Ω uⁿ` per step.
    pub fn integrals(&self) -> Vec<f64> {
        self.values.iter().map(Field::integral).collect()
    }
}

/// Per-step Newton statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub newton_iters: usize,
    pub residual: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// States at nodes `0..=nt`.
    pub states: Vec<StateTriple>,
    /// Statistics for steps `1..=nt` (entry `n − 1`).
    pub steps: Vec<StepInfo>,
    pub params: ModelParams,
}

impl Trajectory {
    pub fn nt(&self) -> usize {
        self.states.len() - 1
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.states[0].grid()
    }

    pub fn final_state(&self) -> &StateTriple {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Residual of one implicit Euler step in stacked form `[R₁; R₂; R₃]`.
pub(crate) fn step_residual(
    prev: &StateTriple,
    next: &[f64],
    u: &Field,
    params: &ModelParams,
    dt: f64,
) -> Result<Vec<f64>> {
    let grid = prev.grid();
    let n = grid.len();
    let (mu, rest) = next.split_at(n);
    let (phi, sigma) = rest.split_at(n);
    let (mu0, phi0, sigma0) = (prev.mu.values(), prev.phi.values(), prev.sigma.values());
    let mut lap = vec![0.0; 3 * n];
    grid.laplacian_into(mu, &mut lap[..n]);
    grid.laplacian_into(phi, &mut lap[n..2 * n]);
    grid.laplacian_into(sigma, &mut lap[2 * n..]);
    let (alpha, beta) = (params.alpha, params.beta);
    let uv = u.values();
    let mut res = vec![0.0; 3 * n];
    for i in 0..n {
        let exchange = params.prolif.eval(phi[i], 0) * (sigma[i] - mu[i]);
        let dphi = (phi[i] - phi0[i]) / dt;
        res[i] = alpha * (mu[i] - mu0[i]) / dt + dphi - lap[i] - exchange;
        res[n + i] = mu[i] - beta * dphi + lap[n + i] - params.potential.f1(phi[i])?;
        res[2 * n + i] = (sigma[i] - sigma0[i]) / dt - lap[2 * n + i] + exchange - uv[i];
    }
    Ok(res)
}

/// Stacked L² norm `sqrt(|cell| Σ R²)`.
pub(crate) fn stacked_norm(grid: &Grid, v: &[f64]) -> f64 {
    (grid.cell_volume() * v.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

/// Which terms of the step Jacobian to include; only diagnostics drop any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct JacobianTerms {
    pub drop_f2: bool,
}

/// Jacobian of [`step_residual`] with respect to the new stacked state.
/// Row blocks are the three equations, column blocks `(μ, φ, σ)`.
pub(crate) fn step_jacobian(
    grid: &Grid,
    next: &[f64],
    params: &ModelParams,
    dt: f64,
    terms: JacobianTerms,
) -> Result<CsrMatrix> {
    let n = grid.len();
    let (mu, rest) = next.split_at(n);
    let (phi, sigma) = rest.split_at(n);
    let mut entries = Vec::with_capacity(3 * n * (2 * grid.dim() + 3));
    let mut off = Vec::new();
    let (alpha, beta) = (params.alpha, params.beta);
    for i in 0..n {
        let p = params.prolif.eval(phi[i], 0);
        let dp_ex = params.prolif.eval(phi[i], 1) * (sigma[i] - mu[i]);
        let f2 = if terms.drop_f2 { 0.0 } else { params.potential.f2(phi[i])? };
        let lap_diag = grid.laplacian_row(i, &mut off);
        // R₁ = α(μ−μ⁰)/dt + (φ−φ⁰)/dt − Δμ − P(φ)(σ−μ)
        entries.push((i, i, alpha / dt - lap_diag + p));
        for &(j, w) in &off {
            entries.push((i, j, -w));
        }
        entries.push((i, n + i, 1.0 / dt - dp_ex));
        entries.push((i, 2 * n + i, -p));
        // R₂ = μ − β(φ−φ⁰)/dt + Δφ − F'(φ)
        entries.push((n + i, i, 1.0));
        entries.push((n + i, n + i, -beta / dt + lap_diag - f2));
        for &(j, w) in &off {
            entries.push((n + i, n + j, w));
        }
        // R₃ = (σ−σ⁰)/dt − Δσ + P(φ)(σ−μ) − u
        entries.push((2 * n + i, i, -p));
        entries.push((2 * n + i, n + i, dp_ex));
        entries.push((2 * n + i, 2 * n + i, 1.0 / dt - lap_diag + p));
        for &(j, w) in &off {
            entries.push((2 * n + i, 2 * n + j, -w));
        }
    }
    Ok(CsrMatrix::from_triplets(3 * n, entries))
}

/// Advances one implicit Euler step, returning the new state and Newton statistics.
pub fn step_state(
    prev: &StateTriple,
    u_next: &Field,
    params: &ModelParams,
    dt: f64,
    opts: &SolverOptions,
) -> Result<(StateTriple, StepInfo)> {
    let grid = Arc::clone(prev.grid());
    let n = grid.len();
    let pot = &params.potential;
    if let Some(&bad) = prev.phi.values().iter().find(|&&v| !pot.admissible(v)) {
        return Err(Error::DomainViolation {
            r: bad,
            bound: if bad < 0.0 { pot.r_minus() } else { pot.r_plus() },
        });
    }
    let mut x = prev.stacked();
    let mut history = Vec::new();
    let mut halvings_total = 0;
    for iter in 0..=opts.newton_max_iter {
        let res = step_residual(prev, &x, u_next, params, dt)?;
        let r_norm = stacked_norm(&grid, &res);
        history.push(r_norm);
        if !r_norm.is_finite() {
            break;
        }
        if r_norm <= opts.newton_tol {
            return Ok((
                StateTriple::from_stacked(&grid, &x),
                StepInfo {
                    newton_iters: iter,
                    residual: r_norm,
                    halvings: halvings_total,
                },
            ));
        }
        if iter == opts.newton_max_iter {
            break;
        }
        let jac = step_jacobian(&grid, &x, params, dt, JacobianTerms::default())?;
        let system = LinearSystem::new(jac, opts.linear)?;
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let (delta, _) = system.solve(&rhs)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            if (0..n).all(|i| pot.admissible(x[n + i] + lambda * delta[n + i])) {
                accepted = true;
                break;
            }
            lambda *= 0.5;
            halvings_total += 1;
        }
        if !accepted {
            let (value, bound) = (0..n)
                .map(|i| x[n + i] + 2.0 * lambda * delta[n + i])
                .find(|&v| !pot.admissible(v))
                .map(|v| (v, if v < 0.0 { pot.r_minus() } else { pot.r_plus() }))
                .unwrap_or((f64::NAN, f64::NAN));
            return Err(Error::Separation { step: 0, value, bound });
        }
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi += lambda * di;
        }
    }
    Err(Error::Newton {
        step: 0,
        residuals: history,
    })
}

/// Chains [`step_state`] over `n = 1..=nt`.
pub fn solve_state(
    initial: &StateTriple,
    u: &ControlTrajectory,
    params: &ModelParams,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    if u.nt() != params.nt {
        return Err(Error::Shape(format!(
            "control has {} steps, model expects {}",
            u.nt(),
            params.nt
        )));
    }
    let dt = params.dt();
    let mut states = Vec::with_capacity(params.nt + 1);
    let mut steps = Vec::with_capacity(params.nt);
    states.push(initial.clone());
    for n in 1..=params.nt {
        let (next, info) = step_state(&states[n - 1], u.at(n), params, dt, opts).map_err(|e| e.at_step(n))?;
        states.push(next);
        steps.push(info);
    }
    Ok(Trajectory {
        states,
        steps,
        params: params.clone(),
    })
}

/// Per-step balance residuals of `d/dt ∫(αμ + φ + σ) = ∫u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassLedger {
    pub masses: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `mass(T) − mass(0)`
    pub drift: f64,
    /// `dt Σₙ ∫uⁿ`
    pub supplied: f64,
}

impl MassLedger {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

pub fn mass_ledger(traj: &Trajectory, u: &ControlTrajectory) -> MassLedger {
    let alpha = traj.params.alpha;
    let dt = traj.params.dt();
    let masses: Vec<f64> = traj.states.iter().map(|s| s.mass(alpha)).collect();
    let supplies = u.integrals();
    let residuals = (1..masses.len())
        .map(|n| (masses[n] - masses[n - 1] - dt * supplies[n - 1]).abs())
        .collect();
    MassLedger {
        drift: masses[masses.len() - 1] - masses[0],
        supplied: dt * supplies.iter().sum::<f64>(),
        masses,
        residuals,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub phi_min: f64,
    pub phi_max: f64,
    /// `min(min φ − r₋, r₊ − max φ)` over the whole run.
    pub margin: f64,
    /// Margin at every node `0..=nt`.
    pub margins: Vec<f64>,
}

pub fn separation_report(traj: &Trajectory, pot: &Potential) -> SeparationReport {
    let margins: Vec<f64> = traj
        .states
        .iter()
        .map(|s| pot.margin(s.phi.min()).min(pot.margin(s.phi.max())))
        .collect();
    SeparationReport {
        phi_min: traj.states.iter().map(|s| s.phi.min()).fold(f64::INFINITY, f64::min),
        phi_max: traj.states.iter().map(|s| s.phi.max()).fold(f64::NEG_INFINITY, f64::max),
        margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        margins,
    }
}

/// Measured quantities from a successful hypothesis check.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    /// Distance of `φ₀` from the ends of the potential domain.
    pub initial_margin: f64,
    /// L² norm of `(1/β)(μ₀ + Δφ₀ − B(φ₀) − π(φ₀))`; reported, not enforced.
    pub initial_velocity_norm: f64,
}

/// Checks the standing assumptions on weights, targets, box, mobilities and
/// initial data before any solve.
pub fn validate_hypotheses(
    params: &ModelParams,
    initial: &StateTriple,
    cost: &CostSpec,
    bounds: &ControlBox,
) -> Result<HypothesisReport> {
    let weights = cost.weights();
    if weights.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
        return Err(Error::Hypothesis {
            hypothesis: "cost weights",
            detail: format!("weights must be nonnegative and finite, got {weights:?}"),
        });
    }
    if weights.iter().all(|&b| b == 0.0) {
        return Err(Error::Hypothesis {
            hypothesis: "cost weights",
            detail: "weights must not all be zero".into(),
        });
    }
    if !cost.targets_finite() {
        return Err(Error::Hypothesis {
            hypothesis: "targets",
            detail: "tracking targets must be finite".into(),
        });
    }
    bounds.validate()?;
    if !(params.alpha > 0.0 && params.beta > 0.0) {
        return Err(Error::Hypothesis {
            hypothesis: "relaxation and viscosity",
            detail: format!("alpha and beta must be positive, got {} and {}", params.alpha, params.beta),
        });
    }
    if !(params.t_final > 0.0) || params.nt == 0 {
        return Err(Error::Hypothesis {
            hypothesis: "time horizon",
            detail: format!("need T > 0 and nt ≥ 1, got T = {} and nt = {}", params.t_final, params.nt),
        });
    }
    if !initial.is_finite() {
        return Err(Error::Hypothesis {
            hypothesis: "initial data",
            detail: "initial fields must be finite".into(),
        });
    }
    let pot = &params.potential;
    let (lo, hi) = (initial.phi.min(), initial.phi.max());
    let initial_margin = pot.margin(lo).min(pot.margin(hi));
    if !(initial_margin > 0.0) {
        return Err(Error::Hypothesis {
            hypothesis: "initial separation",
            detail: format!(
                "phi0 range [{lo}, {hi}] must lie strictly inside ({}, {})",
                pot.r_minus(),
                pot.r_plus()
            ),
        });
    }
    let lap = initial.phi.laplacian();
    let mut vel = Vec::with_capacity(initial.phi.len());
    for ((&m, &p), &l) in initial.mu.values().iter().zip(initial.phi.values()).zip(lap.values()) {
        let s = pot.split(p)?;
        vel.push((m + l - s.b - s.pi) / params.beta);
    }
    let initial_velocity_norm = Field::from_vec(initial.grid(), vel).norm();
    Ok(HypothesisReport {
        initial_margin,
        initial_velocity_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn params(pot: Potential, prolif: Proliferation, t: f64, nt: usize) -> ModelParams {
        ModelParams {
            alpha: 0.5,
            beta: 0.5,
            potential: pot,
            prolif,
            t_final: t,
            nt,
        }
    }

    fn line(n: usize) -> Arc<Grid> {
        Arc::new(Grid::line(n, 1.0).unwrap())
    }

    #[test]
    fn zero_equilibrium_is_preserved() {
        let g = line(16);
        let p = params(Potential::regular(), Proliferation::default(), 0.1, 10);
        let init = StateTriple::zeros(&g);
        let u = ControlTrajectory::zeros(&g, 10, p.dt());
        let traj = solve_state(&init, &u, &p, &SolverOptions::default()).unwrap();
        for s in &traj.states {
            assert_eq!(s.phi.max_abs(), 0.0);
            assert_eq!(s.mu.max_abs(), 0.0);
            assert_eq!(s.sigma.max_abs(), 0.0);
        }
    }

    #[test]
    fn constant_equilibrium_is_fixed_point() {
        // F'(φ*) = μ* = σ*, P arbitrary
        let g = line(8);
        let pot = Potential::logarithmic(2.0);
        let phi = 0.4;
        let mu = pot.f1(phi).unwrap();
        let p = params(pot, Proliferation::default(), 0.05, 5);
        let init = StateTriple::constant(&g, mu, phi, mu);
        let u = ControlTrajectory::zeros(&g, 5, p.dt());
        let opts = SolverOptions::default();
        let traj = solve_state(&init, &u, &p, &opts).unwrap();
        for s in &traj.states {
            assert!((s.phi.values()[3] - phi).abs() < 1e-12);
            assert!((s.mu.values()[3] - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_below_tolerance_and_heat_decoupling() {
        let g = line(32);
        let p = params(Potential::logarithmic(2.0), Proliferation::Constant { p0: 0.0 }, 0.1, 10);
        let init = StateTriple {
            mu: Field::zeros(&g),
            phi: Field::from_fn(&g, |x| 0.3 * (PI * x[0]).cos()),
            sigma: Field::constant(&g, 0.5),
        };
        let u = ControlTrajectory::zeros(&g, 10, p.dt());
        let opts = SolverOptions::default();
        let traj = solve_state(&init, &u, &p, &opts).unwrap();
        for info in &traj.steps {
            assert!(info.residual <= opts.newton_tol);
        }
        // homogeneous σ with P ≡ 0 stays constant
        for s in &traj.states {
            assert!(s.sigma.values().iter().all(|&v| (v - 0.5).abs() < 1e-13));
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let g = line(16);
        let p = params(Potential::logarithmic(2.0), Proliferation::default(), 0.05, 8);
        let init = StateTriple {
            mu: Field::zeros(&g),
            phi: Field::from_fn(&g, |x| 0.3 * (PI * x[0]).cos()),
            sigma: Field::constant(&g, 0.5),
        };
        let u = ControlTrajectory::from_fn(&g, 8, p.dt(), |x, t| 0.4 * (PI * x[0]).cos() * (1.0 + t));
        let a = solve_state(&init, &u, &p, &SolverOptions::default()).unwrap();
        let b = solve_state(&init, &u, &p, &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mass_ledger_tracks_constant_supply() {
        let g = line(16);
        let p = params(Potential::logarithmic(2.0), Proliferation::default(), 0.1, 20);
        let init = StateTriple {
            mu: Field::zeros(&g),
            phi: Field::from_fn(&g, |x| 0.3 * (PI * x[0]).cos()),
            sigma: Field::constant(&g, 0.5),
        };
        let opts = SolverOptions::default();
        for c in [0.0, 0.7] {
            let u = ControlTrajectory::constant(&g, 20, p.dt(), c);
            let traj = solve_state(&init, &u, &p, &opts).unwrap();
            let ledger = mass_ledger(&traj, &u);
            assert!(ledger.max_residual() <= 10.0 * opts.newton_tol * g.measure());
            // telescoping: drift = c |Ω| T
            assert!((ledger.drift - c * g.measure() * p.t_final).abs() < 1e-10);
        }
    }

    #[test]
    fn separation_report_examples() {
        let g = line(4);
        let p = params(Potential::regular(), Proliferation::default(), 0.1, 1);
        let traj = Trajectory {
            states: vec![StateTriple::zeros(&g)],
            steps: vec![],
            params: p,
        };
        assert_eq!(separation_report(&traj, &Potential::regular()).margin, f64::INFINITY);
        assert_eq!(separation_report(&traj, &Potential::logarithmic(2.0)).margin, 1.0);
    }

    #[test]
    fn step_errors_carry_time_index() {
        let g = line(8);
        let p = params(Potential::logarithmic(2.0), Proliferation::default(), 0.1, 4);
        let init = StateTriple::constant(&g, 0.0, 0.1, 0.0);
        let u = ControlTrajectory::zeros(&g, 4, p.dt());
        let opts = SolverOptions {
            newton_max_iter: 0,
            ..Default::default()
        };
        match solve_state(&init, &u, &p, &opts) {
            Err(Error::Newton { step, residuals }) => {
                assert_eq!(step, 1);
                assert_eq!(residuals.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let g = line(6);
        let p = params(Potential::logarithmic(1.5), Proliferation::default(), 0.1, 4);
        let dt = p.dt();
        let prev = StateTriple {
            mu: Field::from_fn(&g, |x| 0.2 * x[0]),
            phi: Field::from_fn(&g, |x| 0.3 * (PI * x[0]).cos()),
            sigma: Field::from_fn(&g, |x| 0.5 + 0.1 * x[0]),
        };
        let u = Field::from_fn(&g, |x| x[0]);
        let mut x = prev.stacked();
        for (i, v) in x.iter_mut().enumerate() {
            *v += 0.01 * (i as f64).sin();
        }
        let jac = step_jacobian(&g, &x, &p, dt, JacobianTerms::default()).unwrap();
        let eps = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            let rp = step_residual(&prev, &xp, &u, &p, dt).unwrap();
            let rm = step_residual(&prev, &xm, &u, &p, dt).unwrap();
            for i in 0..x.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                assert!((fd - jac.get(i, j)).abs() < 1e-5 * (1.0 + fd.abs()), "({i},{j})");
            }
        }
    }
}
