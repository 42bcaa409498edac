//! Finite-difference validation of every OCP formulation's cost, transition,
//! and constraint linearizations, plus the path/embedded equivalence and a
//! first full solve of the standing-balance problem.

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::Arc;
use wbmpc::assets::{benchmark_tree, nominal_configuration};
use wbmpc::model::RobotState;
use wbmpc::ocp::gait::GaitSchedule;
use wbmpc::ocp::{
    build_ocp, cold_start, desired_force_distribution, extract_solution, make_time_grid,
    Formulation, OcpProblem, OcpWeights, TaskCommand,
};
use wbmpc::solver::{solve, ConvergenceStatus, SolverSettings, StageOcp};

fn test_problem(formulation: Formulation, command: TaskCommand) -> OcpProblem {
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let mut state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    state.v[0] = 0.1;
    let gait = GaitSchedule::trot(0.8, 0.08);
    let grid = make_time_grid(8, 0.01, 10f64.powf(1.0 / 13.0)).unwrap();
    build_ocp(
        formulation,
        &tree,
        grid,
        &gait,
        &command,
        &OcpWeights::default(),
        0.7,
        &nominal,
        &state,
        0.05,
    )
    .unwrap()
}

fn random_point(p: &OcpProblem, k: usize, rng: &mut StdRng) -> (DVector<f64>, DVector<f64>) {
    let nx = p.state_dim();
    let nu = p.input_dim(k);
    let mut x = DVector::from_fn(nx, |_, _| rng.random_range(-0.2..0.2));
    let mut u = DVector::from_fn(nu, |_, _| rng.random_range(-0.3..0.3));
    // Keep contact forces in a physically plausible range so the cone rows
    // and momentum terms are well scaled.
    let layout = p.layout(k);
    for (local, i) in layout.force.clone().enumerate() {
        u[i] = if local % 3 == 2 { rng.random_range(50.0..250.0) } else { rng.random_range(-40.0..40.0) };
    }
    if let Some(vel) = &layout.vel {
        for i in vel.clone() {
            u[i] = rng.random_range(-0.5..0.5);
        }
    }
    // Momentum states of the centroidal-velocity formulations.
    if !matches!(
        p.formulation,
        Formulation::WbInvDyn | Formulation::WbFwdDyn | Formulation::CentAccPath | Formulation::CentAccEmbedded
    ) {
        for i in 0..6 {
            x[i] = rng.random_range(-8.0..8.0);
        }
    }
    (x, u)
}

fn check_jacobian<F>(
    label: &str,
    value: &DVector<f64>,
    jac: &nalgebra::DMatrix<f64>,
    x0: &DVector<f64>,
    eval: F,
) where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = 1e-6;
    let direct = eval(x0);
    assert!(
        (&direct - value).norm() < 1e-9 * (1.0 + value.norm()),
        "{}: linearized value differs from direct evaluation",
        label
    );
    for j in 0..x0.len() {
        let mut xp = x0.clone();
        xp[j] += h;
        let mut xm = x0.clone();
        xm[j] -= h;
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
        let col = jac.column(j);
        let scale = fd.norm().max(1.0);
        assert!(
            (&col - &fd).norm() / scale < 2e-5,
            "{}: column {} mismatch |J - FD| = {}",
            label,
            j,
            (&col - &fd).norm()
        );
    }
}

#[test]
fn all_formulations_linearizations_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(2024);
    for formulation in Formulation::ALL {
        let command = TaskCommand {
            base_velocity: [0.2, 0.0, 0.0],
            yaw_rate: 0.1,
            ee_velocity: [0.2, 0.0, 0.0],
            ee_force: [-30.0, 0.0, 0.0],
        };
        let p = test_problem(formulation, command);
        let n = p.num_nodes();
        for &k in &[0usize, 2, n - 2] {
            let (x, u) = random_point(&p, k, &mut rng);

            // Transition.
            let lin = p.transition_linearized(k, &x, &u);
            check_jacobian(
                &format!("{} transition/x (k={})", formulation.name(), k),
                &lin.value,
                &lin.a,
                &x,
                |xx| p.transition_value(k, xx, &u),
            );
            check_jacobian(
                &format!("{} transition/u (k={})", formulation.name(), k),
                &lin.value,
                &lin.b,
                &u,
                |uu| p.transition_value(k, &x, uu),
            );

            // Stage equalities.
            if p.stage_eq_dim(k) > 0 {
                let lin = p.stage_eq_linearized(k, &x, &u);
                check_jacobian(
                    &format!("{} stage-eq/x (k={})", formulation.name(), k),
                    &lin.value,
                    &lin.jx,
                    &x,
                    |xx| p.stage_eq_value(k, xx, &u),
                );
                check_jacobian(
                    &format!("{} stage-eq/u (k={})", formulation.name(), k),
                    &lin.value,
                    &lin.ju,
                    &u,
                    |uu| p.stage_eq_value(k, &x, uu),
                );
            }

            // Stage inequalities.
            if p.stage_ineq_dim(k) > 0 {
                let lin = p.stage_ineq_linearized(k, &x, &u);
                check_jacobian(
                    &format!("{} stage-ineq/x (k={})", formulation.name(), k),
                    &lin.value,
                    &lin.jx,
                    &x,
                    |xx| p.stage_ineq_value(k, xx, &u),
                );
                check_jacobian(
                    &format!("{} stage-ineq/u (k={})", formulation.name(), k),
                    &lin.value,
                    &lin.ju,
                    &u,
                    |uu| p.stage_ineq_value(k, &x, uu),
                );
            }

            // State groups at a node >= 1.
            let node = k.max(1);
            if p.state_eq_dim(node) > 0 {
                let lin = p.state_eq_linearized(node, &x);
                check_jacobian(
                    &format!("{} state-eq (node {})", formulation.name(), node),
                    &lin.value,
                    &lin.jx,
                    &x,
                    |xx| p.state_eq_value(node, xx),
                );
            }
            if p.state_ineq_dim(node) > 0 {
                let lin = p.state_ineq_linearized(node, &x);
                check_jacobian(
                    &format!("{} state-ineq (node {})", formulation.name(), node),
                    &lin.value,
                    &lin.jx,
                    &x,
                    |xx| p.state_ineq_value(node, xx),
                );
            }

            // Cost gradients.
            let quad = p.cost_quadratic(k, &x, Some(&u));
            assert!((quad.value - p.cost_value(k, &x, Some(&u))).abs() < 1e-9 * (1.0 + quad.value.abs()));
            let h = 1e-6;
            for j in 0..x.len() {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let fd = (p.cost_value(k, &xp, Some(&u)) - p.cost_value(k, &xm, Some(&u))) / (2.0 * h);
                assert!(
                    (quad.grad_x[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{} cost grad_x[{}] {} vs {}",
                    formulation.name(),
                    j,
                    quad.grad_x[j],
                    fd
                );
            }
            for j in 0..u.len() {
                let mut up = u.clone();
                up[j] += h;
                let mut um = u.clone();
                um[j] -= h;
                let fd = (p.cost_value(k, &x, Some(&up)) - p.cost_value(k, &x, Some(&um))) / (2.0 * h);
                assert!(
                    (quad.grad_u[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{} cost grad_u[{}]",
                    formulation.name(),
                    j
                );
            }
        }
    }
}

#[test]
fn path_and_embedded_centroidal_variants_agree_at_feasible_points() {
    // At a point satisfying the path constraint (h = A v), eliminating the
    // base quantity in the embedded variant reproduces the path transition.
    let mut rng = StdRng::seed_from_u64(7);
    let path = test_problem(Formulation::CentVelPath, TaskCommand::default());
    let emb = test_problem(Formulation::CentVelEmbedded, TaskCommand::default());
    let tree = benchmark_tree();
    for k in [0usize, 3] {
        let nv = 22;
        let (mut x, u_path) = random_point(&path, k, &mut rng);
        // Make the state consistent: h = A(q) v for the sampled v.
        let v = u_path.rows(0, nv).into_owned();
        let q = path.node_configuration(&x);
        let (_, h) = wbmpc::dynamics::centroidal_momentum(&tree, &q, &v);
        for i in 0..6 {
            x[i] = h[i];
        }
        let resid = path.stage_eq_value(k, &x, &u_path);
        assert!(resid.rows(0, 6).norm() < 1e-9, "path rows feasible by construction");

        // Embedded input: joint part of v plus the same forces.
        let layout_e = emb.layout(k);
        let mut u_emb = DVector::zeros(layout_e.dim);
        let vel = layout_e.vel.clone().unwrap();
        for j in 0..16 {
            u_emb[vel.start + j] = v[6 + j];
        }
        let lp = path.layout(k);
        for (i, c) in lp.force.clone().enumerate() {
            u_emb[layout_e.force.start + i] = u_path[c];
        }
        let next_path = path.transition_value(k, &x, &u_path);
        let next_emb = emb.transition_value(k, &x, &u_emb);
        assert!(
            (&next_path - &next_emb).norm() < 1e-8 * (1.0 + next_path.norm()),
            "centroidal-velocity transitions differ: {}",
            (&next_path - &next_emb).norm()
        );
    }

    // Acceleration-level pair: at a point where the path rows vanish, the
    // embedded base acceleration reproduces the sampled one.
    let path = test_problem(Formulation::CentAccPath, TaskCommand::default());
    let emb = test_problem(Formulation::CentAccEmbedded, TaskCommand::default());
    for k in [0usize, 3] {
        let nv = 22;
        let (x, mut u_path) = random_point(&path, k, &mut rng);
        let q = path.node_configuration(&x);
        let v = x.rows(nv, nv).into_owned();
        // Choose the base acceleration so the centroidal-rate rows vanish.
        let f = wbmpc::dynamics::ContactForceSet::from_vector(
            &u_path.rows(path.layout(k).force.start, 15).into_owned(),
        );
        let (amat, _) = wbmpc::dynamics::centroidal_momentum(&tree, &q, &v);
        let bias = wbmpc::dynamics::centroidal_momentum_bias(&tree, &q, &v);
        let (mass, com) = wbmpc::dynamics::com_position(&tree, &q);
        let frames = wbmpc::dynamics::contact_frame_positions(&tree, &q);
        let mut w = nalgebra::Vector6::zeros();
        w[2] = -mass * tree.gravity;
        for (i, fi) in f.0.iter().enumerate() {
            for r in 0..3 {
                w[r] += fi[r];
            }
            let n = (frames[i] - com).cross(fi);
            for r in 0..3 {
                w[3 + r] += n[r];
            }
        }
        let a_j = u_path.rows(path.layout(k).acc.clone().unwrap().start + 6, 16).into_owned();
        let a_b_blk = amat.view((0, 0), (6, 6)).into_owned();
        let a_j_blk = amat.view((0, 6), (6, 16)).into_owned();
        let rhs = DVector::from_fn(6, |i, _| w[i] - bias[i]) - &a_j_blk * &a_j;
        let a_b = a_b_blk.lu().solve(&rhs).unwrap();
        let acc_r = path.layout(k).acc.clone().unwrap();
        for i in 0..6 {
            u_path[acc_r.start + i] = a_b[i];
        }
        let resid = path.stage_eq_value(k, &x, &u_path);
        assert!(resid.rows(0, 6).norm() < 1e-7, "rate rows vanish by construction");

        let layout_e = emb.layout(k);
        let mut u_emb = DVector::zeros(layout_e.dim);
        let acc_e = layout_e.acc.clone().unwrap();
        for j in 0..16 {
            u_emb[acc_e.start + j] = a_j[j];
        }
        for (i, c) in path.layout(k).force.clone().enumerate() {
            u_emb[layout_e.force.start + i] = u_path[c];
        }
        let next_path = path.transition_value(k, &x, &u_path);
        let next_emb = emb.transition_value(k, &x, &u_emb);
        assert!(
            (&next_path - &next_emb).norm() < 1e-8 * (1.0 + next_path.norm()),
            "centroidal-acceleration transitions differ: {}",
            (&next_path - &next_emb).norm()
        );
    }
}

#[test]
fn standing_balance_ocp_converges_to_equilibrium() {
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    let gait = GaitSchedule::stand();
    let grid = make_time_grid(10, 0.02, 1.0).unwrap();
    let problem = build_ocp(
        Formulation::WbInvDyn,
        &tree,
        grid,
        &gait,
        &TaskCommand::default(),
        &OcpWeights::default(),
        0.7,
        &nominal,
        &state,
        0.0,
    )
    .unwrap();

    let warm = cold_start(&problem);
    let settings = SolverSettings::batch();
    let (it, stats) = solve(&problem, Some(&warm), &settings).unwrap();
    assert_eq!(stats.status, ConvergenceStatus::Converged, "kkt {}", stats.kkt_residual);
    assert!(stats.iterations <= 15, "took {} iterations", stats.iterations);

    let sol = extract_solution(&problem, it, stats);
    // Stays at the nominal state over the horizon.
    for k in 0..10 {
        let dq = wbmpc::model::difference(&nominal, &sol.configurations[k]).unwrap();
        assert!(dq.norm() < 1e-2, "node {} drifts {}", k, dq.norm());
        assert!(sol.velocities[k].norm() < 1e-1, "node {} moves {}", k, sol.velocities[k].norm());
    }
    // Forces close to the even distribution (the arm shifts the CoM slightly
    // so exact evenness is not expected).
    let even = desired_force_distribution(&tree, &[true; 4]).unwrap();
    for k in 0..9 {
        let mut total_z = 0.0;
        for foot in 0..4 {
            total_z += sol.forces[k].0[foot].z;
            assert!(sol.forces[k].0[foot].z > 0.0, "stance normal force positive");
            assert!(
                (sol.forces[k].0[foot].z - even.0[foot].z).abs() < 0.25 * even.0[foot].z,
                "foot {} force {} far from even {}",
                foot,
                sol.forces[k].0[foot].z,
                even.0[foot].z
            );
        }
        assert!(
            (total_z - 74.5 * 9.81).abs() < 0.01 * 74.5 * 9.81,
            "total normal force {} vs weight {}",
            total_z,
            74.5 * 9.81
        );
    }
}
