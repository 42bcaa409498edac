use nalgebra::DVector;
use std::sync::Arc;
use wbmpc::assets::{benchmark_tree, nominal_configuration};
use wbmpc::model::RobotState;
use wbmpc::ocp::gait::GaitSchedule;
use wbmpc::ocp::{build_ocp, cold_start, make_time_grid, Formulation, OcpWeights, TaskCommand};
use wbmpc::solver::{solve, SolverSettings};

#[test]
#[ignore]
fn debug_standing() {
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    let gait = GaitSchedule::stand();
    let grid = make_time_grid(10, 0.02, 1.0).unwrap();
    let problem = build_ocp(
        Formulation::WbInvDyn, &tree, grid, &gait, &TaskCommand::default(),
        &OcpWeights::default(), 0.7, &nominal, &state, 0.0,
    ).unwrap();
    let warm = cold_start(&problem);
    let mut settings = SolverSettings::batch();
    let sink = Arc::new(std::sync::Mutex::new(Vec::new()));
    settings.diagnostics = Some(sink.clone());
    settings.max_iterations = 60;
    let (_, stats) = solve(&problem, Some(&warm), &settings).unwrap();
    for row in sink.lock().unwrap().iter() {
        println!("iter,kkt,mu: {}", row);
    }
    println!("status {:?} iters {} kkt {:.3e} reg {:.1e} steps {:?}",
        stats.status, stats.iterations, stats.kkt_residual, stats.regularization,
        &stats.step_sizes);
}

#[test]
#[ignore]
fn debug_standing_solution() {
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    let gait = GaitSchedule::stand();
    let grid = make_time_grid(10, 0.02, 1.0).unwrap();
    let problem = build_ocp(
        Formulation::WbInvDyn, &tree, grid, &gait, &TaskCommand::default(),
        &OcpWeights::default(), 0.7, &nominal, &state, 0.0,
    ).unwrap();
    let warm = cold_start(&problem);
    let (it, stats) = solve(&problem, Some(&warm), &SolverSettings::batch()).unwrap();
    let sol = wbmpc::ocp::extract_solution(&problem, it, stats);
    for k in 0..10 {
        let dq = wbmpc::model::difference(&nominal, &sol.configurations[k]).unwrap();
        println!("node {}: |dq| {:.2e} |v| {:.2e} vmax {:.2e}", k, dq.norm(), sol.velocities[k].norm(), sol.velocities[k].amax());
    }
    for k in [0usize, 4, 8] {
        println!("forces node {}: {:?}", k, sol.forces[k].0.iter().map(|f| (f.z*10.0).round()/10.0).collect::<Vec<_>>());
    }
    let dq = wbmpc::model::difference(&nominal, &sol.configurations[9]).unwrap();
    println!("dq node9: {:?}", dq.iter().map(|v| (v*1e4).round()/1e4).collect::<Vec<_>>());
    println!("v node3: {:?}", sol.velocities[3].iter().map(|v| (v*1e4).round()/1e4).collect::<Vec<_>>());
    println!("tau node0: {:?}", sol.torques[0].iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
}

#[test]
#[ignore]
fn debug_warm_solve_trace() {
    use wbmpc::ocp::gait::GaitSchedule;
    use wbmpc::runtime::{MpcRuntime, MpcSettings};
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    let mut settings = MpcSettings::default_for(Formulation::WbInvDyn);
    settings.solver.max_iterations = 40;
    let gait = GaitSchedule::trot(0.8, 0.08);
    let mut rt = MpcRuntime::new(Arc::clone(&tree), gait, nominal, settings);
    let _ = rt.mpc_step(&state, &Default::default(), 0.0).unwrap();
    // Second solve warm-started, trace it.
    let sink = Arc::new(std::sync::Mutex::new(Vec::new()));
    rt.settings.solver.diagnostics = Some(sink.clone());
    let sol = rt.mpc_step(&state, &Default::default(), 0.0125).unwrap();
    for row in sink.lock().unwrap().iter() {
        println!("trace {}", row);
    }
    println!("warm solve: iters {} kkt {:.2e} steps {:?}", sol.stats.iterations, sol.stats.kkt_residual,
       sol.stats.step_sizes.iter().map(|s| (s*1e3).round()/1e3).collect::<Vec<_>>());
}

#[test]
#[ignore]
fn debug_kick_solve() {
    use wbmpc::ocp::gait::GaitSchedule;
    use wbmpc::runtime::{MpcRuntime, MpcSettings};
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let mut settings = MpcSettings::default_for(Formulation::WbInvDyn);
    settings.solver.max_iterations = 100;
    let gait = GaitSchedule::trot(0.8, 0.08);
    let mut rt = MpcRuntime::new(Arc::clone(&tree), gait.clone(), nominal.clone(), settings);
    // Settle into the gait for a few solves from the nominal state.
    let mut state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    for k in 0..4 {
        let s = rt.mpc_step(&state, &Default::default(), 2.35 + k as f64 * 0.0125).unwrap();
        println!("settle {} clock {:.4}: iters {} kkt {:.2e}", k, 2.35 + k as f64 * 0.0125, s.stats.iterations, s.stats.kkt_residual);
    }
    // Kick.
    state.v[1] += 0.8;
    let sink = Arc::new(std::sync::Mutex::new(Vec::new()));
    rt.settings.solver.diagnostics = Some(sink.clone());
    let sol = rt.mpc_step(&state, &Default::default(), 2.4).unwrap();
    println!("kick solve: iters {} kkt {:.2e} status {:?}", sol.stats.iterations, sol.stats.kkt_residual, sol.stats.status);
    for row in sink.lock().unwrap().iter().take(40) {
        println!("ktrace {}", row);
    }
}

#[test]
#[ignore]
fn debug_kick_feasibility() {
    use wbmpc::ocp::gait::GaitSchedule;
    use wbmpc::runtime::{MpcRuntime, MpcSettings};
    // Same artificial kick, but with effort limits relaxed 10x: if the solve
    // then converges, the wedge is a genuine torque-bound infeasibility.
    let mut tree_relaxed = benchmark_tree();
    for j in tree_relaxed.joints.iter_mut() {
        j.effort_limit *= 10.0;
    }
    let tree = Arc::new(tree_relaxed);
    let nominal = nominal_configuration(&tree);
    let mut settings = MpcSettings::default_for(Formulation::WbInvDyn);
    settings.solver.max_iterations = 100;
    let gait = GaitSchedule::trot(0.8, 0.08);
    let mut rt = MpcRuntime::new(Arc::clone(&tree), gait.clone(), nominal.clone(), settings);
    let mut state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    for k in 0..4 {
        let _ = rt.mpc_step(&state, &Default::default(), 2.35 + k as f64 * 0.0125).unwrap();
    }
    state.v[1] += 0.8;
    let sol = rt.mpc_step(&state, &Default::default(), 2.4).unwrap();
    println!("relaxed-limits kick: iters {} kkt {:.2e} stale {}", sol.stats.iterations, sol.stats.kkt_residual, sol.stale);
    if !sol.stale {
        let peak = sol.torques.iter().flat_map(|t| t.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        println!("peak commanded torque at nodes 0..2: {:.1} N m", peak);
    }
}

#[test]
#[ignore]
fn debug_kick_direct_solve() {
    use wbmpc::ocp::gait::GaitSchedule;
    use wbmpc::ocp::{build_ocp, cold_start, make_time_grid};
    let mut tree0 = benchmark_tree();
    if std::env::var("WBMPC_RELAX_TAU").is_ok() {
        for j in tree0.joints.iter_mut() {
            j.effort_limit *= 10.0;
        }
    }
    let tree = Arc::new(tree0);
    let nominal = nominal_configuration(&tree);
    let gait = GaitSchedule::trot(0.8, 0.08);
    let mut state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    state.v[1] += 0.8;
    let grid = make_time_grid(15, 0.01, 10f64.powf(1.0 / 13.0)).unwrap();
    let problem = build_ocp(
        Formulation::WbInvDyn, &tree, grid, &gait, &Default::default(),
        &Default::default(), 0.7, &nominal, &state, 2.4,
    ).unwrap();
    let warm = cold_start(&problem);
    let mut settings = SolverSettings::mpc();
    settings.max_iterations = 120;
    if std::env::var("WBMPC_BIG").is_ok() {
        settings = SolverSettings::batch();
        settings.max_iterations = 400;
        settings.equality_damping = 1.0;
    }
    match solve(&problem, Some(&warm), &settings) {
        Ok((it, stats)) => {
            println!("direct kick solve: iters {} kkt {:.2e} status {:?} reg {:.1e}",
                stats.iterations, stats.kkt_residual, stats.status, stats.regularization);
            use wbmpc::solver::StageOcp;
            for k in 0..14 {
                let e = problem.stage_eq_value(k, &it.xs[k], &it.us[k]);
                let se = if k >= 1 { problem.state_eq_value(k, &it.xs[k]) } else { nalgebra::DVector::zeros(0) };
                let d = (problem.transition_value(k, &it.xs[k], &it.us[k]) - &it.xs[k + 1]).abs().amax();
                if e.abs().amax() > 1e-2 || (se.len() > 0 && se.abs().amax() > 1e-2) || d > 1e-2 {
                    println!("  k {:2}: dyn {:.2e} stage_eq {:.2e} state_eq {:.2e}",
                        k, d, e.abs().amax(), if se.len() > 0 { se.abs().amax() } else { 0.0 });
                    if e.abs().amax() > 1.0 {
                        let worst_idx = e.iter().enumerate().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).unwrap().0;
                        println!("      worst stage row {} of {} = {:.2e}", worst_idx, e.len(), e[worst_idx]);
                    }
                    if se.len() > 0 && se.abs().amax() > 1.0 {
                        let worst_idx = se.iter().enumerate().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).unwrap().0;
                        println!("      worst state row {} of {} = {:.2e}", worst_idx, se.len(), se[worst_idx]);
                    }
                }
            }
        }
        Err(e) => println!("direct kick solve ERROR: {}", e),
    }
}

#[test]
#[ignore]
fn debug_velocity_row_rank() {
    let tree = benchmark_tree();
    let q = nominal_configuration(&tree);
    let jacs = wbmpc::dynamics::all_contact_jacobians(&tree, &q);
    // Trot stance FR + RL, swing z-rows FL + RR, arm rows.
    let mut stack = nalgebra::DMatrix::zeros(11, 22);
    stack.view_mut((0, 0), (3, 22)).copy_from(&jacs[1]);
    stack.view_mut((3, 0), (3, 22)).copy_from(&jacs[2]);
    stack.view_mut((6, 0), (1, 22)).copy_from(&jacs[0].row(2));
    stack.view_mut((7, 0), (1, 22)).copy_from(&jacs[3].row(2));
    stack.view_mut((8, 0), (3, 22)).copy_from(&jacs[4]);
    let svd = stack.svd(false, false);
    let sv = svd.singular_values;
    println!("singular values: {:?}", sv.iter().map(|v| (v * 1e6).round() / 1e6).collect::<Vec<_>>());
    println!("condition: {:.2e}", sv[0] / sv[sv.len() - 1]);
}

#[test]
#[ignore]
fn debug_stage_rank() {
    use wbmpc::ocp::gait::GaitSchedule;
    use wbmpc::ocp::{build_ocp, cold_start, make_time_grid};
    use wbmpc::solver::StageOcp;
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let gait = GaitSchedule::trot(0.8, 0.08);
    let mut state = RobotState { q: nominal.clone(), v: DVector::zeros(22) };
    state.v[1] += 0.8;
    let grid = make_time_grid(15, 0.01, 10f64.powf(1.0 / 13.0)).unwrap();
    let problem = build_ocp(
        Formulation::WbInvDyn, &tree, grid, &gait, &Default::default(),
        &Default::default(), 0.7, &nominal, &state, 2.4,
    ).unwrap();
    let warm = cold_start(&problem);
    for k in 0..14 {
        let own = problem.stage_eq_linearized(k, &warm.xs[k], &warm.us[k]);
        let trans = problem.transition_linearized(k, &warm.xs[k], &warm.us[k]);
        let next = problem.state_eq_linearized(k + 1, &warm.xs[k + 1]);
        let m_own = own.value.len();
        let m_next = next.value.len();
        let nu = problem.input_dim(k);
        let mut d = nalgebra::DMatrix::zeros(m_own + m_next, nu);
        d.view_mut((0, 0), (m_own, nu)).copy_from(&own.ju);
        if m_next > 0 {
            d.view_mut((m_own, 0), (m_next, nu)).copy_from(&(&next.jx * &trans.b));
        }
        let sv = d.svd(false, false).singular_values;
        let smin = sv[sv.len() - 1];
        println!("stage {:2}: D is {}x{}, sv_max {:.2e} sv_min {:.2e} cond {:.2e}",
            k, m_own + m_next, nu, sv[0], smin, sv[0] / smin.max(1e-300));
    }
}

#[test]
#[ignore]
fn debug_real_kick_state_solve() {
    use wbmpc::ocp::gait::GaitSchedule;
    use wbmpc::ocp::{build_ocp, cold_start, make_time_grid};
    let text = std::fs::read_to_string("/tmp/dump_state.txt").unwrap();
    let mut lines = text.lines();
    let t: f64 = lines.next().unwrap().parse().unwrap();
    let q: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    let v: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    let state = RobotState {
        q: wbmpc::model::Configuration::from_vector(&DVector::from_vec(q)),
        v: DVector::from_vec(v),
    };
    println!("state at t {}: vy {:.3} |vj| {:.3}", t, state.v[1], state.v.rows(6, 16).norm());
    let tree = Arc::new(benchmark_tree());
    let nominal = nominal_configuration(&tree);
    let gait = GaitSchedule::trot(0.8, 0.08);
    let grid = make_time_grid(15, 0.01, 10f64.powf(1.0 / 13.0)).unwrap();
    let problem = build_ocp(
        Formulation::WbInvDyn, &tree, grid, &gait, &Default::default(),
        &Default::default(), 0.7, &nominal, &state, t,
    ).unwrap();
    let warm = cold_start(&problem);
    let mut settings = SolverSettings::mpc();
    settings.max_iterations = 150;
    match solve(&problem, Some(&warm), &settings) {
        Ok((it, stats)) => {
            println!("real kick solve: iters {} kkt {:.2e} status {:?}", stats.iterations, stats.kkt_residual, stats.status);
            use wbmpc::solver::StageOcp;
            for k in 0..14 {
                let e = problem.stage_eq_value(k, &it.xs[k], &it.us[k]);
                let se = if k >= 1 { problem.state_eq_value(k, &it.xs[k]) } else { nalgebra::DVector::zeros(0) };
                let gmin = problem.stage_ineq_value(k, &it.xs[k], &it.us[k]).min();
                let sgmin = if k >= 1 { problem.state_ineq_value(k, &it.xs[k]).min() } else { 0.0 };
                let d = (problem.transition_value(k, &it.xs[k], &it.us[k]) - &it.xs[k + 1]).abs().amax();
                println!("  k {:2}: dyn {:.1e} eq {:.1e} seq {:.1e} ineq_min {:.1e} sineq_min {:.1e}",
                    k, d, e.abs().amax(), if se.len() > 0 { se.abs().amax() } else { 0.0 }, gmin, sgmin);
            }
        }
        Err(e) => println!("real kick ERROR: {}", e),
    }
}
