//! Optimal control of a relaxed Cahn–Hilliard tumor growth model: implicit
//! Euler forward solver, linearized sensitivities, discrete adjoint and a
//! projected gradient optimizer, plus numerical checks of the underlying
//! estimates.

pub mod adjoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod optimize;
pub mod potentials;
pub mod problem;
pub mod profile;
pub mod sensitivity;
pub mod state;
pub mod verify;

pub use adjoint::{CostSpec, AdjointTrajectory};
pub use error::{Error, Result};
pub use grid::{Field, Grid};
pub use optimize::{ControlBox, OptimizerOptions};
pub use potentials::{Potential, Proliferation};
pub use problem::ControlProblem;
pub use profile::Profile;
pub use state::{ControlTrajectory, ModelParams, SolverOptions, StateTriple, Trajectory};
