//! Backward adjoint system, obtained by transposing the linearized step
//! matrices.
//!
//! With multipliers `(p, q, r)` for the three step equations, the transposed
//! recursion is exactly backward Euler for
//!
//! ```text
//! β ∂t q − ∂t p + Δq − F''(φ̄)q + P'(φ̄)(σ̄ − μ̄)(r − p) = b₁(φ̄ − φ_Q)
//! q − α ∂t p − Δp + P(φ̄)(p − r)                      = b₅(μ̄ − μ_Q)
//! −∂t r − Δr + P(φ̄)(r − p)                           = b₃(σ̄ − σ_Q)
//! ```
//!
//! with coefficients frozen at the later node, and the final-time cost
//! terms reproduce the terminal conditions
//! `p(T) − βq(T) = b₂(φ̄(T) − φ_Ω)`, `αp(T) = b₆(μ̄(T) − μ_Ω)`,
//! `r(T) = b₄(σ̄(T) − σ_Ω)` on a ghost node. The value paired with control
//! interval `n` is stored at node `n − 1`; node `nt` holds the terminal data.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::profile::Profile;
use crate::sensitivity::Linearization;
use crate::state::{JacobianTerms, ModelParams, SolverOptions, StateTriple, Trajectory};

/// Tracking-type cost weights and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// Control cost.
    pub b0: f64,
    /// `φ` tracking over `Q`.
    pub b1: f64,
    /// `φ(T)` tracking.
    pub b2: f64,
    /// `σ` tracking over `Q`.
    pub b3: f64,
    /// `σ(T)` tracking.
    pub b4: f64,
    /// `μ` tracking over `Q`.
    pub b5: f64,
    /// `μ(T)` tracking.
    pub b6: f64,
    pub phi_q: Profile,
    pub phi_omega: Profile,
    pub sigma_q: Profile,
    pub sigma_omega: Profile,
    pub mu_q: Profile,
    pub mu_omega: Profile,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            b0: 0.0,
            b1: 0.0,
            b2: 0.0,
            b3: 0.0,
            b4: 0.0,
            b5: 0.0,
            b6: 0.0,
            phi_q: Profile::default(),
            phi_omega: Profile::default(),
            sigma_q: Profile::default(),
            sigma_omega: Profile::default(),
            mu_q: Profile::default(),
            mu_omega: Profile::default(),
        }
    }
}

impl CostSpec {
    /// `[b₀, …, b₆]`
    pub fn weights(&self) -> [f64; 7] {
        [self.b0, self.b1, self.b2, self.b3, self.b4, self.b5, self.b6]
    }

    pub fn targets_finite(&self) -> bool {
        [
            &self.phi_q,
            &self.phi_omega,
            &self.sigma_q,
            &self.sigma_omega,
            &self.mu_q,
            &self.mu_omega,
        ]
        .iter()
        .all(|p| p.is_finite())
    }

    /// Same targets, tracking weights `b₁…b₆` multiplied by `factor`.
    pub fn scale_tracking(&self, factor: f64) -> CostSpec {
        CostSpec {
            b1: self.b1 * factor,
            b2: self.b2 * factor,
            b3: self.b3 * factor,
            b4: self.b4 * factor,
            b5: self.b5 * factor,
            b6: self.b6 * factor,
            ..self.clone()
        }
    }

    /// All weights, including `b₀`, multiplied by `factor`.
    pub fn scale_all(&self, factor: f64) -> CostSpec {
        CostSpec {
            b0: self.b0 * factor,
            ..self.scale_tracking(factor)
        }
    }

    pub fn tracking_is_zero(&self) -> bool {
        self.weights()[1..].iter().all(|&b| b == 0.0)
    }
}

/// Test hook: deliberate defects in the adjoint solve, used to show that
/// the identity checks are not vacuous.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjointDefect {
    #[default]
    None,
    /// Flip the sign of the `b₃(σ̄ − σ_Q)` source.
    FlipSigmaSource,
    /// Drop the `F''(φ̄)` term from the transposed step matrix.
    DropPotentialCurvature,
}

/// One `(q, p, r)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTriple {
    pub q: Field,
    pub p: Field,
    pub r: Field,
}

/// Terminal data in both forms.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalRecord {
    /// Continuous-form terminal conditions (stored at node `nt`).
    pub continuous: AdjointTriple,
    /// Output of the first backward step (node `nt − 1`), i.e. the values the
    /// discrete recursion effectively starts from.
    pub discrete: AdjointTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub q: Vec<Field>,
    pub p: Vec<Field>,
    pub r: Vec<Field>,
    pub terminal: TerminalRecord,
}

impl AdjointTrajectory {
    pub fn nt(&self) -> usize {
        self.r.len() - 1
    }

    /// The `r` multiplier paired with control interval `n ∈ 1..=nt`.
    pub fn r_for_control(&self, n: usize) -> &Field {
        &self.r[n - 1]
    }

    pub fn max_abs(&self) -> f64 {
        self.q.iter().chain(&self.p).chain(&self.r).map(Field::max_abs).fold(0.0, f64::max)
    }
}

/// Continuous-form terminal conditions from the final state.
pub fn terminal_conditions(final_state: &StateTriple, cost: &CostSpec, params: &ModelParams) -> Result<AdjointTriple> {
    if !(params.beta > 0.0) {
        return Err(Error::Unsupported(format!("terminal conditions need beta > 0, got {}", params.beta)));
    }
    if !(params.alpha > 0.0) {
        return Err(Error::Unsupported(format!("terminal conditions need alpha > 0, got {}", params.alpha)));
    }
    let grid = final_state.grid();
    let nt = params.nt;
    let dmu = cost.mu_omega.deviation(&final_state.mu, nt);
    let dphi = cost.phi_omega.deviation(&final_state.phi, nt);
    let dsig = cost.sigma_omega.deviation(&final_state.sigma, nt);
    let p: Vec<f64> = dmu.iter().map(|d| cost.b6 * d / params.alpha).collect();
    let q: Vec<f64> = dphi.iter().zip(&p).map(|(d, pt)| -(cost.b2 * d - pt) / params.beta).collect();
    let r: Vec<f64> = dsig.iter().map(|d| cost.b4 * d).collect();
    Ok(AdjointTriple {
        q: Field::from_vec(grid, q),
        p: Field::from_vec(grid, p),
        r: Field::from_vec(grid, r),
    })
}

/// Backward solve along `base` for the cost linearization.
pub fn solve_adjoint(base: &Trajectory, cost: &CostSpec, opts: &SolverOptions) -> Result<AdjointTrajectory> {
    solve_adjoint_with(base, cost, opts, AdjointDefect::None)
}

#[doc(hidden)]
pub fn solve_adjoint_with(
    base: &Trajectory,
    cost: &CostSpec,
    opts: &SolverOptions,
    defect: AdjointDefect,
) -> Result<AdjointTrajectory> {
    let terms = JacobianTerms {
        drop_f2: defect == AdjointDefect::DropPotentialCurvature,
    };
    let lin = Linearization::build(base, opts, terms, false, true)?;
    adjoint_from(&lin, cost, defect)
}

pub(crate) fn adjoint_from(lin: &Linearization<'_>, cost: &CostSpec, defect: AdjointDefect) -> Result<AdjointTrajectory> {
    let base = lin.base();
    let params = &base.params;
    let grid = Arc::clone(base.grid());
    let n = grid.len();
    let nt = base.nt();
    let (alpha, beta, dt) = (params.alpha, params.beta, params.dt());
    let sigma_sign = if defect == AdjointDefect::FlipSigmaSource { -1.0 } else { 1.0 };

    let terminal = terminal_conditions(base.final_state(), cost, params)?;
    let mut q = vec![Field::zeros(&grid); nt + 1];
    let mut p = q.clone();
    let mut r = q.clone();
    q[nt] = terminal.q.clone();
    p[nt] = terminal.p.clone();
    r[nt] = terminal.r.clone();

    let mut rhs = vec![0.0; 3 * n];
    for k in (1..=nt).rev() {
        let s = &base.states[k];
        let (mu, phi, sig) = (s.mu.values(), s.phi.values(), s.sigma.values());
        let (pn, qn, rn) = (p[k].values(), q[k].values(), r[k].values());
        for i in 0..n {
            rhs[i] = cost.b5 * (mu[i] - cost.mu_q.value(k, i)) + alpha * pn[i] / dt;
            rhs[n + i] = cost.b1 * (phi[i] - cost.phi_q.value(k, i)) + (pn[i] - beta * qn[i]) / dt;
            rhs[2 * n + i] = sigma_sign * cost.b3 * (sig[i] - cost.sigma_q.value(k, i)) + rn[i] / dt;
        }
        // transposed columns are ordered by equation: [p; q; r]
        let x = lin.solve_step_transposed(k, &rhs)?;
        p[k - 1] = Field::from_vec(&grid, x[..n].to_vec());
        q[k - 1] = Field::from_vec(&grid, x[n..2 * n].to_vec());
        r[k - 1] = Field::from_vec(&grid, x[2 * n..].to_vec());
    }
    let discrete = AdjointTriple {
        q: q[nt - 1].clone(),
        p: p[nt - 1].clone(),
        r: r[nt - 1].clone(),
    };
    Ok(AdjointTrajectory {
        q,
        p,
        r,
        terminal: TerminalRecord {
            continuous: terminal,
            discrete,
        },
    })
}

/// Residual norms of the three continuous adjoint equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointResidual {
    /// Equation carrying `F''(φ̄)q`.
    pub q_equation: f64,
    /// Equation carrying `α ∂t p`.
    pub p_equation: f64,
    /// Equation carrying `∂t r`.
    pub r_equation: f64,
}

impl AdjointResidual {
    pub fn total(&self) -> f64 {
        (self.q_equation.powi(2) + self.p_equation.powi(2) + self.r_equation.powi(2)).sqrt()
    }
}

/// Evaluates the continuous adjoint equations on the stored nodes with
/// central time differences and node-aligned coefficients, over interior
/// nodes `1..nt`. Returns discrete `L²(Q)` norms. `drop_curvature` omits the
/// `F''` term (diagnostic).
pub fn adjoint_pde_residual(
    adj: &AdjointTrajectory,
    base: &Trajectory,
    cost: &CostSpec,
    drop_curvature: bool,
) -> Result<AdjointResidual> {
    let params = &base.params;
    let grid = base.grid();
    let n = grid.len();
    let nt = base.nt();
    let (alpha, beta, dt) = (params.alpha, params.beta, params.dt());
    let mut acc = [0.0f64; 3];
    let mut lap_q = vec![0.0; n];
    let mut lap_p = vec![0.0; n];
    let mut lap_r = vec![0.0; n];
    for j in 1..nt {
        let s = &base.states[j];
        let (mu, phi, sig) = (s.mu.values(), s.phi.values(), s.sigma.values());
        let (q, p, r) = (adj.q[j].values(), adj.p[j].values(), adj.r[j].values());
        grid.laplacian_into(q, &mut lap_q);
        grid.laplacian_into(p, &mut lap_p);
        grid.laplacian_into(r, &mut lap_r);
        let mut sq = [0.0f64; 3];
        for i in 0..n {
            let dq = (adj.q[j + 1].values()[i] - adj.q[j - 1].values()[i]) / (2.0 * dt);
            let dp = (adj.p[j + 1].values()[i] - adj.p[j - 1].values()[i]) / (2.0 * dt);
            let dr = (adj.r[j + 1].values()[i] - adj.r[j - 1].values()[i]) / (2.0 * dt);
            let pf = params.prolif.eval(phi[i], 0);
            let dpf = params.prolif.eval(phi[i], 1) * (sig[i] - mu[i]);
            let f2 = if drop_curvature { 0.0 } else { params.potential.f2(phi[i])? };
            let e1 = beta * dq - dp + lap_q[i] - f2 * q[i] + dpf * (r[i] - p[i])
                - cost.b1 * (phi[i] - cost.phi_q.value(j, i));
            let e2 = q[i] - alpha * dp - lap_p[i] + pf * (p[i] - r[i]) - cost.b5 * (mu[i] - cost.mu_q.value(j, i));
            let e3 = -dr - lap_r[i] + pf * (r[i] - p[i]) - cost.b3 * (sig[i] - cost.sigma_q.value(j, i));
            sq[0] += e1 * e1;
            sq[1] += e2 * e2;
            sq[2] += e3 * e3;
        }
        for c in 0..3 {
            acc[c] += dt * grid.cell_volume() * sq[c];
        }
    }
    Ok(AdjointResidual {
        q_equation: acc[0].sqrt(),
        p_equation: acc[1].sqrt(),
        r_equation: acc[2].sqrt(),
    })
}
