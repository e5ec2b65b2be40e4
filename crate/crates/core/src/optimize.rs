//! Discrete cost, reduced gradient, box projection and projected gradient
//! descent with Armijo backtracking.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{solve_adjoint_with, AdjointTrajectory, CostSpec};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::problem::ControlProblem;
use crate::profile::Profile;
use crate::sensitivity::{Linearization, LinearizedTrajectory};
use crate::state::{ControlTrajectory, Trajectory};

/// Pointwise bounds `u_* ≤ u ≤ u^*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    pub lower: Profile,
    pub upper: Profile,
}

impl ControlBox {
    pub fn constant(lower: f64, upper: f64) -> Self {
        ControlBox {
            lower: Profile::Constant(lower),
            upper: Profile::Constant(upper),
        }
    }

    /// Fails when the bounds cross or are not finite somewhere.
    pub fn validate(&self) -> Result<()> {
        let violation = |detail: String| Error::Hypothesis {
            hypothesis: "control box",
            detail,
        };
        if !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(violation("bounds must be finite".into()));
        }
        let (nodes, cells) = match (&self.lower, &self.upper) {
            (Profile::Series(s), _) | (_, Profile::Series(s)) => (s.len(), s[0].len()),
            (Profile::Field(f), _) | (_, Profile::Field(f)) => (1, f.len()),
            _ => (1, 1),
        };
        for node in 0..nodes {
            for i in 0..cells {
                let (lo, hi) = (self.lower.value(node, i), self.upper.value(node, i));
                if lo > hi {
                    return Err(violation(format!("lower bound {lo} exceeds upper bound {hi} (node {node}, cell {i})")));
                }
            }
        }
        Ok(())
    }

    /// Midpoint control `(u_* + u^*)/2`.
    pub fn midpoint(&self, grid: &std::sync::Arc<Grid>, nt: usize, dt: f64) -> ControlTrajectory {
        let values = (1..=nt)
            .map(|n| {
                Field::from_vec(
                    grid,
                    (0..grid.len())
                        .map(|i| 0.5 * (self.lower.value(n, i) + self.upper.value(n, i)))
                        .collect(),
                )
            })
            .collect();
        ControlTrajectory::new(dt, values).expect("nonempty midpoint control")
    }

    pub fn contains(&self, u: &ControlTrajectory) -> bool {
        u.fields().iter().enumerate().all(|(k, f)| {
            f.values()
                .iter()
                .enumerate()
                .all(|(i, &v)| self.lower.value(k + 1, i) <= v && v <= self.upper.value(k + 1, i))
        })
    }

    /// Per-cell choice of lower or upper bound.
    pub fn vertex(&self, u: &ControlTrajectory, mut choose_upper: impl FnMut(usize, usize) -> bool) -> ControlTrajectory {
        let grid = u.grid().clone();
        let values = (1..=u.nt())
            .map(|n| {
                Field::from_vec(
                    &grid,
                    (0..grid.len())
                        .map(|i| {
                            if choose_upper(n, i) {
                                self.upper.value(n, i)
                            } else {
                                self.lower.value(n, i)
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        ControlTrajectory::new(u.dt(), values).expect("nonempty vertex control")
    }
}

/// Pointwise clip onto the box.
pub fn project_box(u: &ControlTrajectory, bounds: &ControlBox) -> ControlTrajectory {
    let grid = u.grid().clone();
    let values = u
        .fields()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Field::from_vec(
                &grid,
                f.values()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v.max(bounds.lower.value(k + 1, i)).min(bounds.upper.value(k + 1, i)))
                    .collect(),
            )
        })
        .collect();
    ControlTrajectory::new(u.dt(), values).expect("projection keeps shape")
}

/// Cost terms indexed by weight: `terms[i]` belongs to `bᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub terms: [f64; 7],
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.terms.iter().sum()
    }
}

fn half_sq_dev(field: &Field, target: &Profile, node: usize) -> f64 {
    let dev = target.deviation(field, node);
    0.5 * field.grid().dot(&dev, &dev)
}

/// Cumulative cost breakdown at every node `0..=nt`; the last entry is the
/// full cost. Space-time integrals use the right-rectangle rule.
pub fn cumulative_cost(traj: &Trajectory, u: &ControlTrajectory, cost: &CostSpec) -> Result<Vec<CostBreakdown>> {
    let nt = traj.nt();
    if u.nt() != nt || !u.at(1).same_grid(&traj.states[0].phi) {
        return Err(Error::Shape(format!("control has {} steps, trajectory {}", u.nt(), nt)));
    }
    let dt = traj.params.dt();
    let mut out = Vec::with_capacity(nt + 1);
    let mut acc = CostBreakdown::default();
    out.push(acc);
    for n in 1..=nt {
        let s = &traj.states[n];
        acc.terms[0] += dt * 0.5 * cost.b0 * u.at(n).norm_sq();
        acc.terms[1] += dt * cost.b1 * half_sq_dev(&s.phi, &cost.phi_q, n);
        acc.terms[3] += dt * cost.b3 * half_sq_dev(&s.sigma, &cost.sigma_q, n);
        acc.terms[5] += dt * cost.b5 * half_sq_dev(&s.mu, &cost.mu_q, n);
        if n == nt {
            acc.terms[2] = cost.b2 * half_sq_dev(&s.phi, &cost.phi_omega, n);
            acc.terms[4] = cost.b4 * half_sq_dev(&s.sigma, &cost.sigma_omega, n);
            acc.terms[6] = cost.b6 * half_sq_dev(&s.mu, &cost.mu_omega, n);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Discrete cost `J(φ, σ, u)` (plus the optional μ terms).
pub fn evaluate_cost(traj: &Trajectory, u: &ControlTrajectory, cost: &CostSpec) -> Result<CostBreakdown> {
    Ok(*cumulative_cost(traj, u, cost)?.last().expect("at least one node"))
}

/// `J(a, u_a) − J(b, u_b)` summed term by term as `½(x − y)(x + y − 2z)`,
/// which avoids cancelling two nearly equal totals.
pub fn cost_difference(
    a: &Trajectory,
    ua: &ControlTrajectory,
    b: &Trajectory,
    ub: &ControlTrajectory,
    cost: &CostSpec,
) -> Result<f64> {
    let nt = a.nt();
    if b.nt() != nt || ua.nt() != nt || ub.nt() != nt {
        return Err(Error::Shape("cost difference needs equal step counts".into()));
    }
    let grid = a.grid();
    let vol = grid.cell_volume();
    let dt = a.params.dt();
    let pair = |x: &Field, y: &Field, target: &Profile, node: usize| -> f64 {
        let (xv, yv) = (x.values(), y.values());
        let mut acc = 0.0;
        for i in 0..xv.len() {
            acc += (xv[i] - yv[i]) * (xv[i] + yv[i] - 2.0 * target.value(node, i));
        }
        0.5 * vol * acc
    };
    let zero = Profile::Constant(0.0);
    let mut total = 0.0;
    for n in 1..=nt {
        let (sa, sb) = (&a.states[n], &b.states[n]);
        total += dt
            * (cost.b0 * pair(ua.at(n), ub.at(n), &zero, n)
                + cost.b1 * pair(&sa.phi, &sb.phi, &cost.phi_q, n)
                + cost.b3 * pair(&sa.sigma, &sb.sigma, &cost.sigma_q, n)
                + cost.b5 * pair(&sa.mu, &sb.mu, &cost.mu_q, n));
    }
    let (sa, sb) = (a.final_state(), b.final_state());
    total += cost.b2 * pair(&sa.phi, &sb.phi, &cost.phi_omega, nt)
        + cost.b4 * pair(&sa.sigma, &sb.sigma, &cost.sigma_omega, nt)
        + cost.b6 * pair(&sa.mu, &sb.mu, &cost.mu_omega, nt);
    Ok(total)
}

/// Reduced cost `J̃(u) = J(S(u), u)`.
pub fn reduced_cost(u: &ControlTrajectory, problem: &ControlProblem) -> Result<f64> {
    let traj = problem.solve_state(u)?;
    Ok(evaluate_cost(&traj, u, &problem.cost)?.total())
}

/// Directional derivative of the tracking part of the cost along a
/// linearized trajectory.
pub fn tracking_derivative(traj: &Trajectory, lin: &LinearizedTrajectory, cost: &CostSpec) -> Result<f64> {
    let nt = traj.nt();
    let dt = traj.params.dt();
    let pair = |f: &Field, target: &Profile, node: usize, dir: &Field| -> f64 {
        f.grid().dot(&target.deviation(f, node), dir.values())
    };
    let mut acc = 0.0;
    for n in 1..=nt {
        let s = &traj.states[n];
        acc += dt
            * (cost.b1 * pair(&s.phi, &cost.phi_q, n, &lin.theta[n])
                + cost.b3 * pair(&s.sigma, &cost.sigma_q, n, &lin.rho[n])
                + cost.b5 * pair(&s.mu, &cost.mu_q, n, &lin.eta[n]));
    }
    let s = traj.final_state();
    acc += cost.b2 * pair(&s.phi, &cost.phi_omega, nt, &lin.theta[nt])
        + cost.b4 * pair(&s.sigma, &cost.sigma_omega, nt, &lin.rho[nt])
        + cost.b6 * pair(&s.mu, &cost.mu_omega, nt, &lin.eta[nt]);
    Ok(acc)
}

/// Cost, gradient and the intermediate solves at one control.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub cost: CostBreakdown,
    pub gradient: ControlTrajectory,
    pub trajectory: Trajectory,
    pub adjoint: AdjointTrajectory,
}

fn gradient_from(u: &ControlTrajectory, adjoint: &AdjointTrajectory, b0: f64) -> Result<ControlTrajectory> {
    let fields = (1..=u.nt())
        .map(|n| adjoint.r_for_control(n).axpy(b0, u.at(n)))
        .collect::<Result<Vec<_>>>()?;
    ControlTrajectory::new(u.dt(), fields)
}

/// Gradient at a control whose state is already known.
pub fn gradient_at(u: &ControlTrajectory, traj: Trajectory, problem: &ControlProblem) -> Result<GradientEval> {
    let cost = evaluate_cost(&traj, u, &problem.cost)?;
    let adjoint = solve_adjoint_with(&traj, &problem.cost, &problem.solver, problem.defect)?;
    let gradient = gradient_from(u, &adjoint, problem.cost.b0)?;
    Ok(GradientEval {
        cost,
        gradient,
        trajectory: traj,
        adjoint,
    })
}

pub fn cost_and_gradient(u: &ControlTrajectory, problem: &ControlProblem) -> Result<GradientEval> {
    let traj = problem.solve_state(u)?;
    gradient_at(u, traj, problem)
}

/// `L²(Q)` gradient `r + b₀u` of the reduced cost.
pub fn reduced_gradient(u: &ControlTrajectory, problem: &ControlProblem) -> Result<ControlTrajectory> {
    Ok(cost_and_gradient(u, problem)?.gradient)
}

/// `‖u − P(u − g)‖` in `L²(Q)`; zero exactly when the discrete variational
/// inequality holds.
pub fn stationarity_residual(u: &ControlTrajectory, g: &ControlTrajectory, bounds: &ControlBox) -> Result<f64> {
    let trial = project_box(&u.axpy(-1.0, g)?, bounds);
    Ok(u.axpy(-1.0, &trial)?.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViReport {
    /// `min_v ∫(r + b₀u)(v − u)` over the sampled admissible `v`.
    pub min_pairing: f64,
    pub pairings: Vec<f64>,
    /// Same pairings computed through the linearized system.
    pub linearized_pairings: Vec<f64>,
    /// Largest relative disagreement between the two forms.
    pub max_relative_gap: f64,
    /// `‖r + b₀u‖` at the candidate.
    pub gradient_norm: f64,
}

impl ViReport {
    /// Both forms agree to `1e-8` relative.
    pub fn forms_agree(&self) -> bool {
        self.max_relative_gap <= 1e-8
    }
}

/// Samples the variational inequality at `u`: global lower and upper
/// bounds, the projected gradient step, and `n_samples` random box vertices.
/// Each pairing is evaluated in adjoint form and in linearized form.
pub fn variational_inequality_check(
    u: &ControlTrajectory,
    problem: &ControlProblem,
    n_samples: usize,
    seed: u64,
) -> Result<ViReport> {
    let eval = cost_and_gradient(u, problem)?;
    let g = &eval.gradient;
    let lin = Linearization::build(&eval.trajectory, &problem.solver, Default::default(), true, false)?;
    let bounds = &problem.bounds;
    let mut candidates = vec![
        bounds.vertex(u, |_, _| false),
        bounds.vertex(u, |_, _| true),
        project_box(&u.axpy(-1.0, g)?, bounds),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_samples {
        candidates.push(bounds.vertex(u, |_, _| rng.gen_bool(0.5)));
    }
    let floor = 1e-14 * (1.0 + eval.cost.total());
    let mut pairings = Vec::with_capacity(candidates.len());
    let mut linearized_pairings = Vec::with_capacity(candidates.len());
    let mut max_relative_gap: f64 = 0.0;
    for v in &candidates {
        let h = v.axpy(-1.0, u)?;
        let adjoint_form = g.inner(&h)?;
        let lin_traj = lin.solve_linearized(&h)?;
        let linear_form = tracking_derivative(&eval.trajectory, &lin_traj, &problem.cost)? + problem.cost.b0 * u.inner(&h)?;
        let gap = (adjoint_form - linear_form).abs() / adjoint_form.abs().max(linear_form.abs()).max(floor);
        max_relative_gap = max_relative_gap.max(gap);
        pairings.push(adjoint_form);
        linearized_pairings.push(linear_form);
    }
    Ok(ViReport {
        min_pairing: pairings.iter().copied().fold(f64::INFINITY, f64::min),
        pairings,
        linearized_pairings,
        max_relative_gap,
        gradient_norm: g.norm(),
    })
}

const SHORT_STEP_MEMORY: usize = 9;

/// How each line search picks its first trial step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// Always start from `initial_step`.
    Fixed,
    /// Start from the Barzilai–Borwein step of the last accepted move
    /// (the very first iteration uses `initial_step`).
    BarzilaiBorwein,
    /// Adaptive alternation: the smallest short step `⟨s, y⟩/⟨y, y⟩` of the
    /// last few iterations when it is well below the long step `⟨s, s⟩/⟨s, y⟩`,
    /// the long step otherwise.
    AdaptiveBarzilaiBorwein,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Stop once the stationarity residual falls to this value.
    pub tol_stat: f64,
    /// Also stop when the cost itself falls to this value (0 disables).
    pub cost_target: f64,
    pub initial_step: f64,
    pub backtrack: f64,
    pub c_armijo: f64,
    pub max_backtracks: usize,
    pub step_rule: StepRule,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iters: 200,
            tol_stat: 1e-8,
            cost_target: 0.0,
            initial_step: 1.0,
            backtrack: 0.5,
            c_armijo: 1e-4,
            max_backtracks: 40,
            step_rule: StepRule::AdaptiveBarzilaiBorwein,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub u_opt: ControlTrajectory,
    /// Reduced cost at every iterate, starting with the projected initial guess.
    pub cost_history: Vec<f64>,
    pub stationarity_history: Vec<f64>,
    pub termination: Termination,
    /// Gradient steps taken.
    pub iterations: usize,
    pub notes: Vec<String>,
}

impl OptimizationResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("history starts with the initial cost")
    }

    pub fn final_stationarity(&self) -> f64 {
        *self.stationarity_history.last().expect("history starts with the initial residual")
    }
}

/// Projected gradient descent `u ← P(u − s g)` with Armijo backtracking on
/// the projected step: accept when `J̃(u⁺) ≤ J̃(u) − (c/s)‖u⁺ − u‖²`.
pub fn projected_gradient_descent(
    u0: &ControlTrajectory,
    problem: &ControlProblem,
    opts: &OptimizerOptions,
) -> Result<OptimizationResult> {
    let bounds = &problem.bounds;
    let mut notes = Vec::new();
    if problem.cost.b0 == 0.0 {
        notes.push("b0 = 0: no control cost, optimal controls need not be unique".to_string());
    }
    let mut u = project_box(u0, bounds);
    let mut eval = cost_and_gradient(&u, problem)?;
    let mut cost = eval.cost.total();
    let mut stat = stationarity_residual(&u, &eval.gradient, bounds)?;
    let mut cost_history = vec![cost];
    let mut stationarity_history = vec![stat];
    let mut step = opts.initial_step;
    let mut iterations = 0;
    let mut recent_short = VecDeque::with_capacity(SHORT_STEP_MEMORY);
    let termination = loop {
        if stat <= opts.tol_stat || cost <= opts.cost_target {
            break Termination::Converged;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIters;
        }
        let g = &eval.gradient;
        let mut trial_step = step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let candidate = project_box(&u.axpy(-trial_step, g)?, bounds);
            let moved_sq = candidate.axpy(-1.0, &u)?.norm().powi(2);
            if moved_sq == 0.0 {
                break;
            }
            // a failed forward solve counts as insufficient decrease
            if let Ok(traj) = problem.solve_state(&candidate) {
                let new_cost = evaluate_cost(&traj, &candidate, &problem.cost)?.total();
                if new_cost <= cost - opts.c_armijo / trial_step * moved_sq {
                    accepted = Some((candidate, traj, new_cost));
                    break;
                }
            }
            trial_step *= opts.backtrack;
        }
        let Some((candidate, traj, new_cost)) = accepted else {
            notes.push(format!("line search failed at iteration {iterations}"));
            break Termination::LineSearchFailure;
        };
        let new_eval = gradient_at(&candidate, traj, problem)?;
        if opts.step_rule != StepRule::Fixed {
            let s = candidate.axpy(-1.0, &u)?;
            let y = new_eval.gradient.axpy(-1.0, &eval.gradient)?;
            let sy = s.inner(&y)?;
            step = if sy > 0.0 {
                let long = s.inner(&s)? / sy;
                let short = sy / y.inner(&y)?;
                if recent_short.len() == SHORT_STEP_MEMORY {
                    recent_short.pop_front();
                }
                recent_short.push_back(short);
                let pick = if opts.step_rule == StepRule::AdaptiveBarzilaiBorwein && short < 0.8 * long {
                    recent_short.iter().copied().fold(f64::INFINITY, f64::min)
                } else {
                    long
                };
                pick.clamp(1e-10, 1e10)
            } else {
                opts.initial_step
            };
        }
        u = candidate;
        eval = new_eval;
        cost = new_cost;
        stat = stationarity_residual(&u, &eval.gradient, bounds)?;
        cost_history.push(cost);
        stationarity_history.push(stat);
        iterations += 1;
    };
    Ok(OptimizationResult {
        u_opt: u,
        cost_history,
        stationarity_history,
        termination,
        iterations,
        notes,
    })
}
