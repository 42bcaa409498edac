//! Stage-structured NLP interface consumed by the interior-point solver.
//!
//! A problem has `N` nodes. Node 0's state is pinned to the measured value;
//! stages `k = 0..N-2` own `(x_k, u_k)` and the transition to `x_{k+1}`;
//! node `N-1` is terminal. Constraints come in four groups:
//!
//! - stage equalities `e(x_k, u_k) = 0` whose input Jacobian has full row
//!   rank (the solver eliminates them inside the Riccati sweep);
//! - state equalities `e(x_k) = 0` at nodes `k >= 1`, which the solver folds
//!   into the preceding stage through the dynamics;
//! - stage inequalities `g(x_k, u_k) >= 0`;
//! - state inequalities `g(x_k) >= 0` at nodes `k >= 1` (bounds).

use nalgebra::{DMatrix, DVector};

/// Quadratic expansion of a stage or terminal cost.
#[derive(Clone, Debug)]
pub struct CostQuad {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_u: DVector<f64>,
    pub hess_xx: DMatrix<f64>,
    pub hess_uu: DMatrix<f64>,
    pub hess_xu: DMatrix<f64>,
}

/// Value and Jacobians of a transition `x_{k+1} = f(x_k, u_k)`.
#[derive(Clone, Debug)]
pub struct TransitionLin {
    pub value: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Value and Jacobians of a constraint block on `(x, u)`.
#[derive(Clone, Debug)]
pub struct ConstraintLin {
    pub value: DVector<f64>,
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
}

/// Value and Jacobian of a state-only constraint block.
#[derive(Clone, Debug)]
pub struct StateConstraintLin {
    pub value: DVector<f64>,
    pub jx: DMatrix<f64>,
}

pub trait StageOcp {
    fn num_nodes(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn input_dim(&self, k: usize) -> usize;
    fn initial_state(&self) -> DVector<f64>;

    /// Stage cost (`u = Some`) or terminal cost (`u = None`).
    fn cost_value(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64;
    fn cost_quadratic(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> CostQuad;

    fn transition_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn transition_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> TransitionLin;

    fn stage_eq_dim(&self, k: usize) -> usize;
    fn stage_eq_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn stage_eq_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintLin;

    /// State-only equalities at node `k` (meaningful for `k >= 1`).
    fn state_eq_dim(&self, k: usize) -> usize;
    fn state_eq_value(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;
    fn state_eq_linearized(&self, k: usize, x: &DVector<f64>) -> StateConstraintLin;

    fn stage_ineq_dim(&self, k: usize) -> usize;
    fn stage_ineq_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn stage_ineq_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintLin;

    fn state_ineq_dim(&self, k: usize) -> usize;
    fn state_ineq_value(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;
    fn state_ineq_linearized(&self, k: usize, x: &DVector<f64>) -> StateConstraintLin;
}
