//! Linearized state system around a base trajectory (the directional
//! derivative `DS(u)h`) and the Fréchet remainder of the control-to-state map.
//!
//! Every step reuses the step Jacobian of the forward scheme evaluated at
//! the converged state, so the adjoint recursion is its exact transpose.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::linalg::LinearSystem;
use crate::problem::ControlProblem;
use crate::state::{step_jacobian, ControlTrajectory, JacobianTerms, SolverOptions, StateTriple, Trajectory};

/// Factorised step Jacobians (and optionally their transposes) along a trajectory.
pub struct Linearization<'a> {
    base: &'a Trajectory,
    forward: Vec<LinearSystem>,
    transposed: Vec<LinearSystem>,
}

impl<'a> Linearization<'a> {
    pub fn new(base: &'a Trajectory, opts: &SolverOptions) -> Result<Self> {
        Self::build(base, opts, JacobianTerms::default(), true, true)
    }

    pub(crate) fn build(
        base: &'a Trajectory,
        opts: &SolverOptions,
        terms: JacobianTerms,
        forward: bool,
        transposed: bool,
    ) -> Result<Self> {
        let grid = base.grid();
        let dt = base.params.dt();
        let mut fwd = Vec::new();
        let mut adj = Vec::new();
        for n in 1..=base.nt() {
            let jac = step_jacobian(grid, &base.states[n].stacked(), &base.params, dt, terms).map_err(|e| e.at_step(n))?;
            if transposed {
                adj.push(LinearSystem::new(jac.transpose(), opts.linear)?);
            }
            if forward {
                fwd.push(LinearSystem::new(jac, opts.linear)?);
            }
        }
        Ok(Linearization {
            base,
            forward: fwd,
            transposed: adj,
        })
    }

    pub fn base(&self) -> &Trajectory {
        self.base
    }

    /// Solves `Jₙ x = b` for step `n ∈ 1..=nt`.
    pub(crate) fn solve_step(&self, n: usize, b: &[f64]) -> Result<Vec<f64>> {
        self.forward[n - 1].solve(b).map(|(x, _)| x).map_err(|e| e.at_step(n))
    }

    /// Solves `Jₙᵀ x = b` for step `n ∈ 1..=nt`.
    pub(crate) fn solve_step_transposed(&self, n: usize, b: &[f64]) -> Result<Vec<f64>> {
        self.transposed[n - 1].solve(b).map(|(x, _)| x).map_err(|e| e.at_step(n))
    }

    /// Implicit Euler for the linearized system driven by `h`, from zero data.
    pub fn solve_linearized(&self, h: &ControlTrajectory) -> Result<LinearizedTrajectory> {
        let base = self.base;
        let nt = base.nt();
        if h.nt() != nt {
            return Err(Error::Shape(format!("direction has {} steps, trajectory {}", h.nt(), nt)));
        }
        let grid = Arc::clone(base.grid());
        let n = grid.len();
        let (alpha, beta, dt) = (base.params.alpha, base.params.beta, base.params.dt());
        let mut eta = vec![Field::zeros(&grid)];
        let mut theta = vec![Field::zeros(&grid)];
        let mut rho = vec![Field::zeros(&grid)];
        let mut rhs = vec![0.0; 3 * n];
        for k in 1..=nt {
            let (e0, t0, r0) = (eta[k - 1].values(), theta[k - 1].values(), rho[k - 1].values());
            let hk = h.at(k).values();
            for i in 0..n {
                rhs[i] = (alpha * e0[i] + t0[i]) / dt;
                rhs[n + i] = -beta * t0[i] / dt;
                rhs[2 * n + i] = r0[i] / dt + hk[i];
            }
            let x = self.solve_step(k, &rhs)?;
            eta.push(Field::from_vec(&grid, x[..n].to_vec()));
            theta.push(Field::from_vec(&grid, x[n..2 * n].to_vec()));
            rho.push(Field::from_vec(&grid, x[2 * n..].to_vec()));
        }
        Ok(LinearizedTrajectory { eta, theta, rho })
    }
}

/// `(η, θ, ρ)` at nodes `0..=nt`; all zero at node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedTrajectory {
    pub eta: Vec<Field>,
    pub theta: Vec<Field>,
    pub rho: Vec<Field>,
}

impl LinearizedTrajectory {
    pub fn nt(&self) -> usize {
        self.eta.len() - 1
    }

    /// Largest pointwise difference over all components and nodes.
    pub fn max_abs_diff(&self, other: &LinearizedTrajectory) -> f64 {
        let pairs = self
            .eta
            .iter()
            .zip(&other.eta)
            .chain(self.theta.iter().zip(&other.theta))
            .chain(self.rho.iter().zip(&other.rho));
        pairs.map(|(a, b)| (a - b).max_abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.eta
            .iter()
            .chain(&self.theta)
            .chain(&self.rho)
            .map(Field::max_abs)
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, a: f64) -> LinearizedTrajectory {
        let s = |v: &Vec<Field>| v.iter().map(|f| f.scale(a)).collect();
        LinearizedTrajectory {
            eta: s(&self.eta),
            theta: s(&self.theta),
            rho: s(&self.rho),
        }
    }

    pub fn add(&self, other: &LinearizedTrajectory) -> LinearizedTrajectory {
        let s = |a: &Vec<Field>, b: &Vec<Field>| a.iter().zip(b).map(|(x, y)| x + y).collect();
        LinearizedTrajectory {
            eta: s(&self.eta, &other.eta),
            theta: s(&self.theta, &other.theta),
            rho: s(&self.rho, &other.rho),
        }
    }
}

/// Solves the linearized system around `base` in direction `h`.
pub fn solve_linearized(base: &Trajectory, h: &ControlTrajectory, opts: &SolverOptions) -> Result<LinearizedTrajectory> {
    Linearization::build(base, opts, JacobianTerms::default(), true, false)?.solve_linearized(h)
}

/// `max_n ‖fₙ‖ + (Σₙ dt ‖∇fₙ‖²)^{1/2}`: the default remainder norm.
pub fn trajectory_norm(fields: &[Field], dt: f64) -> f64 {
    let sup = fields.iter().map(Field::norm).fold(0.0, f64::max);
    let grad: f64 = fields[1..].iter().map(Field::grad_norm_sq).sum::<f64>() * dt;
    sup + grad.sqrt()
}

/// `(Σₙ dt ‖(fₙ − fₙ₋₁)/dt‖²)^{1/2}`, the time-derivative part of an H¹-in-time norm.
pub fn time_derivative_norm(fields: &[Field], dt: f64) -> f64 {
    let acc: f64 = fields.windows(2).map(|w| (&w[1] - &w[0]).norm_sq()).sum();
    (acc / dt).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderNorms {
    /// μ-component `ζ`.
    pub zeta: f64,
    /// φ-component `ψ`.
    pub psi: f64,
    /// σ-component `χ`.
    pub chi: f64,
    /// Time-derivative norms of the three components (diagnostic).
    pub time_derivative: [f64; 3],
}

impl RemainderNorms {
    pub fn total(&self) -> f64 {
        self.zeta + self.psi + self.chi
    }
}

/// Norms of `S(u + h) − S(u) − DS(u)h`, component by component.
pub fn frechet_remainder(u: &ControlTrajectory, h: &ControlTrajectory, problem: &ControlProblem) -> Result<RemainderNorms> {
    let base = problem.solve_state(u)?;
    let lin = solve_linearized(&base, h, &problem.solver)?;
    let moved = problem.solve_state(&u.axpy(1.0, h)?)?;
    remainder_from(&base, &moved, &lin)
}

pub(crate) fn remainder_from(base: &Trajectory, moved: &Trajectory, lin: &LinearizedTrajectory) -> Result<RemainderNorms> {
    let dt = base.params.dt();
    let diff = |pick: fn(&StateTriple) -> &Field, lin: &[Field]| -> Vec<Field> {
        base.states
            .iter()
            .zip(&moved.states)
            .zip(lin)
            .map(|((b, m), l)| &(pick(m) - pick(b)) - l)
            .collect()
    };
    let zeta = diff(|s| &s.mu, &lin.eta);
    let psi = diff(|s| &s.phi, &lin.theta);
    let chi = diff(|s| &s.sigma, &lin.rho);
    Ok(RemainderNorms {
        zeta: trajectory_norm(&zeta, dt),
        psi: trajectory_norm(&psi, dt),
        chi: trajectory_norm(&chi, dt),
        time_derivative: [
            time_derivative_norm(&zeta, dt),
            time_derivative_norm(&psi, dt),
            time_derivative_norm(&chi, dt),
        ],
    })
}

/// Helper for tests and checks: the zero linearized trajectory.
pub fn zero_linearized(grid: &Arc<Grid>, nt: usize) -> LinearizedTrajectory {
    let z = vec![Field::zeros(grid); nt + 1];
    LinearizedTrajectory {
        eta: z.clone(),
        theta: z.clone(),
        rho: z,
    }
}
