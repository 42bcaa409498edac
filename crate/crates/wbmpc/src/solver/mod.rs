//! Primal-dual interior-point solver for stage-structured NLPs.
//!
//! The method follows the classic monotone barrier scheme: for a fixed
//! barrier parameter, Newton steps on the perturbed KKT conditions are
//! computed by folding the inequality blocks into the stage Hessians and
//! solving the remaining equality-constrained LQ problem with the Riccati
//! recursion; a fraction-to-boundary rule and an l1 merit line search
//! globalize the step, and the barrier parameter shrinks once the inner
//! KKT residual is small enough.

pub mod ip;
pub mod lq;
pub mod problem;
pub mod riccati;

pub use ip::{solve, Iterate, SolverError};
pub use problem::{ConstraintLin, CostQuad, StageOcp, StateConstraintLin, TransitionLin};
pub use riccati::{riccati_solve, RiccatiSolution, StageBlocks, TerminalBlocks};

use serde::{Deserialize, Serialize};

/// Solver configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Iteration cap. MPC mode uses a small fixed cap (default 5) and returns
    /// the best iterate; batch mode solves to tolerance.
    pub max_iterations: usize,
    /// Unscaled KKT tolerance for convergence.
    pub tolerance: f64,
    /// Initial barrier parameter.
    pub mu_init: f64,
    /// Multiplicative barrier reduction factor in (0, 1).
    pub mu_reduction: f64,
    /// Fraction-to-boundary parameter in (0, 1).
    pub fraction_to_boundary: f64,
    /// Inertia-correction floor for the Riccati recursion.
    pub regularization_floor: f64,
    /// Warm-start the primal variables from a supplied iterate.
    pub warm_start: bool,
    /// Curvature added along stage-equality normals, `sigma * C' C`. On the
    /// linearized feasible manifold this only shifts the objective by a
    /// constant, so the subproblem minimizer is unchanged; it conditions the
    /// input-space elimination when the iterate is far from feasibility.
    pub equality_damping: f64,
    /// Optional per-iteration diagnostics sink (CSV rows).
    #[serde(skip)]
    pub diagnostics: Option<std::sync::Arc<std::sync::Mutex<Vec<String>>>>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self::batch()
    }
}

impl SolverSettings {
    /// Solve to tolerance (offline / test mode).
    pub fn batch() -> Self {
        Self {
            max_iterations: 120,
            tolerance: 1e-6,
            mu_init: 1e-2,
            mu_reduction: 0.2,
            fraction_to_boundary: 0.995,
            regularization_floor: 1e-8,
            warm_start: true,
            equality_damping: 0.0,
            diagnostics: None,
        }
    }

    /// Receding-horizon mode: moderate cap, best iterate returned. Warm
    /// starts typically converge in well under ten iterations; gait switches
    /// need the headroom.
    pub fn mpc() -> Self {
        Self {
            max_iterations: 30,
            tolerance: 1e-4,
            mu_init: 1e-4,
            mu_reduction: 0.1,
            fraction_to_boundary: 0.995,
            regularization_floor: 1e-8,
            warm_start: true,
            equality_damping: 1.0,
            diagnostics: None,
        }
    }
}

/// Termination status of a solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

/// Statistics reported with every solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub solve_time: f64,
    pub step_sizes: Vec<f64>,
    pub status: ConvergenceStatus,
    pub regularization: f64,
}
