//! Linear-quadratic stage problem, usable directly with the solver.
//!
//! Handy for testing (classical LQR has a closed-form solution) and as a
//! minimal example of the [`StageOcp`] interface. Optional box bounds on the
//! inputs and a single linear state equality exercise the constraint paths.

use super::problem::{ConstraintLin, CostQuad, StageOcp, StateConstraintLin, TransitionLin};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct LqProblem {
    pub nodes: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub x0: DVector<f64>,
    /// Optional symmetric input bound |u_i| <= u_max.
    pub u_max: Option<f64>,
    /// Optional state equality rows `E x = e` applied at one node.
    pub state_eq: Option<(usize, DMatrix<f64>, DVector<f64>)>,
}

impl LqProblem {
    pub fn new(
        nodes: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Self {
        let q_terminal = q.clone();
        Self { nodes, a, b, q, r, q_terminal, x0, u_max: None, state_eq: None }
    }

    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }
}

impl StageOcp for LqProblem {
    fn num_nodes(&self) -> usize {
        self.nodes
    }

    fn state_dim(&self) -> usize {
        self.nx()
    }

    fn input_dim(&self, _k: usize) -> usize {
        self.nu()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn cost_value(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64 {
        let qm = if k + 1 == self.nodes { &self.q_terminal } else { &self.q };
        let mut c = 0.5 * (x.transpose() * qm * x)[0];
        if let Some(u) = u {
            c += 0.5 * (u.transpose() * &self.r * u)[0];
        }
        c
    }

    fn cost_quadratic(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> CostQuad {
        let qm = if k + 1 == self.nodes { &self.q_terminal } else { &self.q };
        let nu = u.map(|u| u.len()).unwrap_or(0);
        CostQuad {
            value: self.cost_value(k, x, u),
            grad_x: qm * x,
            grad_u: u.map(|u| &self.r * u).unwrap_or_else(|| DVector::zeros(0)),
            hess_xx: qm.clone(),
            hess_uu: if nu > 0 { self.r.clone() } else { DMatrix::zeros(0, 0) },
            hess_xu: DMatrix::zeros(x.len(), nu),
        }
    }

    fn transition_value(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn transition_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> TransitionLin {
        TransitionLin {
            value: self.transition_value(k, x, u),
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    fn stage_eq_dim(&self, _k: usize) -> usize {
        0
    }

    fn stage_eq_value(&self, _k: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn stage_eq_linearized(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintLin {
        ConstraintLin {
            value: DVector::zeros(0),
            jx: DMatrix::zeros(0, x.len()),
            ju: DMatrix::zeros(0, u.len()),
        }
    }

    fn state_eq_dim(&self, k: usize) -> usize {
        match &self.state_eq {
            Some((node, e, _)) if *node == k => e.nrows(),
            _ => 0,
        }
    }

    fn state_eq_value(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        match &self.state_eq {
            Some((node, e, rhs)) if *node == k => e * x - rhs,
            _ => DVector::zeros(0),
        }
    }

    fn state_eq_linearized(&self, k: usize, x: &DVector<f64>) -> StateConstraintLin {
        match &self.state_eq {
            Some((node, e, rhs)) if *node == k => StateConstraintLin { value: e * x - rhs, jx: e.clone() },
            _ => StateConstraintLin { value: DVector::zeros(0), jx: DMatrix::zeros(0, x.len()) },
        }
    }

    fn stage_ineq_dim(&self, _k: usize) -> usize {
        if self.u_max.is_some() {
            2 * self.nu()
        } else {
            0
        }
    }

    fn stage_ineq_value(&self, _k: usize, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self.u_max {
            Some(um) => {
                let nu = u.len();
                let mut g = DVector::zeros(2 * nu);
                for i in 0..nu {
                    g[i] = um - u[i];
                    g[nu + i] = u[i] + um;
                }
                g
            }
            None => DVector::zeros(0),
        }
    }

    fn stage_ineq_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintLin {
        let value = self.stage_ineq_value(k, x, u);
        let nu = u.len();
        let mut ju = DMatrix::zeros(value.len(), nu);
        if self.u_max.is_some() {
            for i in 0..nu {
                ju[(i, i)] = -1.0;
                ju[(nu + i, i)] = 1.0;
            }
        }
        let jx = DMatrix::zeros(value.len(), x.len());
        ConstraintLin { value, jx, ju }
    }

    fn state_ineq_dim(&self, _k: usize) -> usize {
        0
    }

    fn state_ineq_value(&self, _k: usize, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn state_ineq_linearized(&self, _k: usize, x: &DVector<f64>) -> StateConstraintLin {
        StateConstraintLin { value: DVector::zeros(0), jx: DMatrix::zeros(0, x.len()) }
    }
}

/// Independent finite-horizon LQR oracle: backward Riccati recursion and
/// forward rollout of `u_k = -K_k x_k`, for the unconstrained problem.
pub fn lqr_reference(lq: &LqProblem) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n_stages = lq.nodes - 1;
    let mut p = lq.q_terminal.clone();
    let mut gains = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        let bt_p = lq.b.transpose() * &p;
        let h = &lq.r + &bt_p * &lq.b;
        let k = h
            .clone()
            .cholesky()
            .expect("LQR Hessian SPD")
            .solve(&(&bt_p * &lq.a));
        p = &lq.q + lq.a.transpose() * &p * &lq.a - (&bt_p * &lq.a).transpose() * &k;
        gains.push(k);
    }
    gains.reverse();
    let mut xs = vec![lq.x0.clone()];
    let mut us = Vec::new();
    for k in 0..n_stages {
        let u = -&gains[k] * &xs[k];
        xs.push(&lq.a * &xs[k] + &lq.b * &u);
        us.push(u);
    }
    (xs, us)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve, ConvergenceStatus, SolverSettings};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_lq(seed: u64, nodes: usize) -> LqProblem {
        let mut rng = StdRng::seed_from_u64(seed);
        let nx = 4;
        let nu = 2;
        let a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.6..0.6));
        let b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-0.8..0.8));
        let q = DMatrix::from_diagonal(&DVector::from_fn(nx, |_, _| rng.random_range(0.5..2.0)));
        let r = DMatrix::from_diagonal(&DVector::from_fn(nu, |_, _| rng.random_range(0.2..1.0)));
        let x0 = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
        LqProblem::new(nodes, a, b, q, r, x0)
    }

    #[test]
    fn matches_classical_lqr() {
        for seed in 0..10 {
            let lq = sample_lq(seed, 12);
            let (xs_ref, us_ref) = lqr_reference(&lq);
            let (it, stats) = solve(&lq, None, &SolverSettings::batch()).unwrap();
            assert_eq!(stats.status, ConvergenceStatus::Converged);
            for k in 0..lq.nodes - 1 {
                assert!((&it.us[k] - &us_ref[k]).norm() < 1e-8, "u mismatch at {}", k);
                assert!((&it.xs[k + 1] - &xs_ref[k + 1]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn inactive_inequality_does_not_change_solution() {
        let mut lq = sample_lq(3, 8);
        let (_, us_ref) = lqr_reference(&lq);
        lq.u_max = Some(1e3); // far from the unconstrained optimum
        let settings = SolverSettings::batch();
        let (it, stats) = solve(&lq, None, &settings).unwrap();
        assert_eq!(stats.status, ConvergenceStatus::Converged);
        for k in 0..lq.nodes - 1 {
            assert!(
                (&it.us[k] - &us_ref[k]).norm() < 10.0 * settings.tolerance,
                "u deviates with inactive bound at {}",
                k
            );
        }
    }

    #[test]
    fn active_input_bound_is_respected_strictly() {
        let mut lq = sample_lq(5, 10);
        lq.x0 *= 5.0; // make the unconstrained controls exceed the bound
        let (_, us_ref) = lqr_reference(&lq);
        let peak = us_ref.iter().flat_map(|u| u.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        let um = 0.5 * peak;
        lq.u_max = Some(um);
        let (it, stats) = solve(&lq, None, &SolverSettings::batch()).unwrap();
        assert_eq!(stats.status, ConvergenceStatus::Converged);
        let mut active = false;
        for u in &it.us {
            for v in u.iter() {
                assert!(v.abs() <= um + 1e-9, "bound violated: {} > {}", v.abs(), um);
                if (v.abs() - um).abs() < 1e-3 {
                    active = true;
                }
            }
        }
        assert!(active, "expected at least one active bound");
    }

    #[test]
    fn state_equality_is_folded_through_dynamics() {
        let mut lq = sample_lq(8, 9);
        let nx = 4;
        let mut e = DMatrix::zeros(2, nx);
        e[(0, 0)] = 1.0;
        e[(1, 2)] = 1.0;
        let rhs = DVector::from_vec(vec![0.3, -0.2]);
        lq.state_eq = Some((4, e.clone(), rhs.clone()));
        let (it, stats) = solve(&lq, None, &SolverSettings::batch()).unwrap();
        assert_eq!(stats.status, ConvergenceStatus::Converged);
        assert!((&e * &it.xs[4] - &rhs).norm() < 1e-7);
        // Terminal-node equality exercises the last fold.
        let mut lq2 = sample_lq(9, 9);
        lq2.state_eq = Some((8, e.clone(), rhs.clone()));
        let (it2, stats2) = solve(&lq2, None, &SolverSettings::batch()).unwrap();
        assert_eq!(stats2.status, ConvergenceStatus::Converged);
        assert!((&e * &it2.xs[8] - &rhs).norm() < 1e-7);
    }

    #[test]
    fn warm_start_at_optimum_converges_without_moving() {
        // Primal warm start at the optimum: one multiplier-recovery step at
        // most, and the primal trajectory stays put.
        let lq = sample_lq(2, 6);
        let (xs_ref, us_ref) = lqr_reference(&lq);
        let warm = crate::solver::Iterate::from_primal(xs_ref, us_ref.clone());
        let settings = SolverSettings::batch();
        let (it, stats) = solve(&lq, Some(&warm), &settings).unwrap();
        assert_eq!(stats.status, ConvergenceStatus::Converged);
        assert!(stats.iterations <= 2, "took {} iterations", stats.iterations);
        for k in 0..lq.nodes - 1 {
            assert!((&it.us[k] - &us_ref[k]).norm() < 10.0 * settings.tolerance);
        }
    }

    #[test]
    fn fraction_to_boundary_respects_rule() {
        use crate::solver::ip::fraction_to_boundary;
        let s = DVector::from_vec(vec![1.0, 2.0]);
        // Direction drives the first slack to zero at step 0.5.
        let ds = DVector::from_vec(vec![-2.0, 0.5]);
        let tau = 0.995;
        let alpha = fraction_to_boundary(&s, &ds, tau);
        assert!((alpha - 0.5 * tau).abs() < 1e-12);
        // All-positive direction: full step.
        let ds = DVector::from_vec(vec![0.1, 0.5]);
        assert_eq!(fraction_to_boundary(&s, &ds, tau), 1.0);
    }
}
