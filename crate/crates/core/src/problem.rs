use std::sync::Arc;

use crate::adjoint::{AdjointDefect, CostSpec};
use crate::error::Result;
use crate::grid::Grid;
use crate::optimize::ControlBox;
use crate::state::{solve_state, validate_hypotheses, ControlTrajectory, HypothesisReport, ModelParams, SolverOptions, StateTriple, Trajectory};

/// Everything needed to evaluate the reduced cost and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub grid: Arc<Grid>,
    pub params: ModelParams,
    pub cost: CostSpec,
    pub bounds: ControlBox,
    pub initial: StateTriple,
    pub solver: SolverOptions,
    #[doc(hidden)]
    pub defect: AdjointDefect,
}

impl ControlProblem {
    pub fn new(
        grid: Arc<Grid>,
        params: ModelParams,
        cost: CostSpec,
        bounds: ControlBox,
        initial: StateTriple,
        solver: SolverOptions,
    ) -> Self {
        ControlProblem {
            grid,
            params,
            cost,
            bounds,
            initial,
            solver,
            defect: AdjointDefect::None,
        }
    }

    pub fn validate(&self) -> Result<HypothesisReport> {
        for p in [
            &self.cost.phi_q,
            &self.cost.phi_omega,
            &self.cost.sigma_q,
            &self.cost.sigma_omega,
            &self.cost.mu_q,
            &self.cost.mu_omega,
            &self.bounds.lower,
            &self.bounds.upper,
        ] {
            p.check_shape(&self.grid, self.params.nt)?;
        }
        validate_hypotheses(&self.params, &self.initial, &self.cost, &self.bounds)
    }

    pub fn dt(&self) -> f64 {
        self.params.dt()
    }

    pub fn nt(&self) -> usize {
        self.params.nt
    }

    pub fn zero_control(&self) -> ControlTrajectory {
        ControlTrajectory::zeros(&self.grid, self.nt(), self.dt())
    }

    /// The control-to-state map.
    pub fn solve_state(&self, u: &ControlTrajectory) -> Result<Trajectory> {
        solve_state(&self.initial, u, &self.params, &self.solver)
    }

    pub fn with_cost(&self, cost: CostSpec) -> ControlProblem {
        ControlProblem { cost, ..self.clone() }
    }
}
