//! Self-verification suites: the independent numerical oracles, runnable
//! from the CLI against the bundled model.

use crate::dynamics::derivatives::rnea_derivatives;
use crate::dynamics::{self, ContactForceSet};
use crate::model::{integrate, Configuration, KinematicTree};
use crate::ocp::{make_time_grid, Formulation};
use crate::solver::riccati;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Clone, Debug)]
pub struct VerifyRow {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
}

pub struct VerifyReport {
    pub seed: u64,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

fn random_state(tree: &KinematicTree, rng: &mut StdRng) -> (Configuration, DVector<f64>) {
    let nv = tree.nv();
    let mut q = crate::assets::nominal_configuration(tree);
    if q.joints.len() != tree.n_joints() {
        q = Configuration::identity(tree.n_joints());
        q.base_pos.z = 0.6;
    }
    q.base_quat = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
    )) * q.base_quat;
    for i in 0..tree.n_joints() {
        q.joints[i] += rng.random_range(-0.3..0.3);
    }
    let v = DVector::from_fn(nv, |_, _| rng.random_range(-1.0..1.0));
    (q, v)
}

fn random_forces(tree: &KinematicTree, rng: &mut StdRng) -> ContactForceSet {
    ContactForceSet(
        (0..tree.contact_frames.len())
            .map(|_| {
                Vector3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(0.0..200.0),
                )
            })
            .collect(),
    )
}

/// Forward-then-inverse dynamics must reproduce the applied torques.
pub fn fd_id_identity(tree: &KinematicTree, seed: u64, samples: usize) -> VerifyRow {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let (q, v) = random_state(tree, &mut rng);
        let tau = DVector::from_fn(tree.n_joints(), |_, _| rng.random_range(-60.0..60.0));
        let forces = random_forces(tree, &mut rng);
        let a = match dynamics::forward_dynamics(tree, &q, &v, &tau, &forces) {
            Ok(a) => a,
            Err(_) => {
                return VerifyRow {
                    name: "fd-id identity".into(),
                    passed: false,
                    worst: f64::INFINITY,
                    tolerance: 1e-8,
                    samples,
                }
            }
        };
        let back = dynamics::rnea(tree, &q, &v, &a, &forces);
        let mut err = back.rows(0, 6).amax();
        for j in 0..tree.n_joints() {
            err = err.max((back[6 + j] - tau[j]).abs());
        }
        worst = worst.max(err);
    }
    VerifyRow { name: "fd-id identity".into(), passed: worst < 1e-8, worst, tolerance: 1e-8, samples }
}

/// rnea equals `M a + b - J^T F` assembled from separate kernels.
pub fn rnea_composition(tree: &KinematicTree, seed: u64, samples: usize) -> VerifyRow {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(1));
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let (q, v) = random_state(tree, &mut rng);
        let a = DVector::from_fn(tree.nv(), |_, _| rng.random_range(-3.0..3.0));
        let forces = random_forces(tree, &mut rng);
        let lhs = dynamics::rnea(tree, &q, &v, &a, &forces);
        let m = dynamics::mass_matrix(tree, &q);
        let b = dynamics::bias_forces(tree, &q, &v);
        let mut jt_f = DVector::zeros(tree.nv());
        for (i, jac) in dynamics::all_contact_jacobians(tree, &q).iter().enumerate() {
            jt_f += jac.transpose() * forces.0[i];
        }
        let rhs = &m * &a + &b - jt_f;
        let rel = (&lhs - &rhs).norm() / rhs.norm().max(1.0);
        worst = worst.max(rel);
    }
    VerifyRow { name: "rnea composition".into(), passed: worst < 1e-10, worst, tolerance: 1e-10, samples }
}

/// Analytic dynamics derivatives against central finite differences.
pub fn derivative_check(tree: &KinematicTree, seed: u64, samples: usize) -> VerifyRow {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(2));
    let mut worst = 0.0_f64;
    let h = 1e-6;
    let nv = tree.nv();
    for _ in 0..samples {
        let (q, v) = random_state(tree, &mut rng);
        let a = DVector::from_fn(nv, |_, _| rng.random_range(-2.0..2.0));
        let forces = random_forces(tree, &mut rng);
        let der = rnea_derivatives(tree, &q, &v, &a, &forces);
        for j in 0..nv {
            let mut e = DVector::zeros(nv);
            e[j] = h;
            let qp = integrate(&q, &e).unwrap();
            e[j] = -h;
            let qm = integrate(&q, &e).unwrap();
            let fd = (dynamics::rnea(tree, &qp, &v, &a, &forces)
                - dynamics::rnea(tree, &qm, &v, &a, &forces))
                / (2.0 * h);
            let rel = (der.dq.column(j) - &fd).norm() / fd.norm().max(1.0);
            worst = worst.max(rel);

            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let fd = (dynamics::rnea(tree, &q, &vp, &a, &forces)
                - dynamics::rnea(tree, &q, &vm, &a, &forces))
                / (2.0 * h);
            let rel = (der.dv.column(j) - &fd).norm() / fd.norm().max(1.0);
            worst = worst.max(rel);
        }
        // da block against the mass matrix (analytic identity).
        let m = dynamics::mass_matrix(tree, &q);
        worst = worst.max((&der.da - &m).norm() / m.norm());
    }
    VerifyRow { name: "derivatives vs fd".into(), passed: worst < 1e-5, worst, tolerance: 1e-5, samples }
}

/// Riccati direction against a dense factorization of the same KKT system.
pub fn riccati_vs_dense(seed: u64, samples: usize) -> VerifyRow {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(3));
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let n_stages = *[2usize, 5, 10].get(rng.random_range(0..3)).unwrap();
        let nx = rng.random_range(2..=8);
        let nu = rng.random_range(2..=8);
        let stages: Vec<riccati::StageBlocks> = (0..n_stages)
            .map(|_| {
                let m_eq = rng.random_range(0..=nu.min(3));
                random_stage_blocks(nx, nu, m_eq, &mut rng)
            })
            .collect();
        let terminal = riccati::TerminalBlocks {
            q: random_spd(nx, &mut rng),
            q_vec: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
        };
        let dx0 = DVector::from_fn(nx, |_, _| rng.random_range(-0.5..0.5));
        let sol = riccati::riccati_solve(&stages, &terminal, &dx0, 1e-9).unwrap();
        let dense = dense_kkt_direction(&stages, &terminal, &dx0);
        for k in 0..n_stages {
            let scale = dense.1[k].norm().max(1.0);
            worst = worst.max((&sol.du[k] - &dense.1[k]).norm() / scale);
            let scale = dense.0[k + 1].norm().max(1.0);
            worst = worst.max((&sol.dx[k + 1] - &dense.0[k + 1]).norm() / scale);
        }
    }
    VerifyRow { name: "riccati vs dense kkt".into(), passed: worst < 1e-8, worst, tolerance: 1e-8, samples }
}

/// Unconstrained LQ problem against the classical Riccati/LQR solution.
pub fn lqr_match(seed: u64) -> VerifyRow {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(4));
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let nx = 4;
        let nu = 2;
        let lq = crate::solver::lq::LqProblem::new(
            12,
            DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.6..0.6)),
            DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-0.8..0.8)),
            DMatrix::from_diagonal(&DVector::from_fn(nx, |_, _| rng.random_range(0.5..2.0))),
            DMatrix::from_diagonal(&DVector::from_fn(nu, |_, _| rng.random_range(0.2..1.0))),
            DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
        );
        let (xs_ref, us_ref) = crate::solver::lq::lqr_reference(&lq);
        let (it, _) = crate::solver::solve(&lq, None, &crate::solver::SolverSettings::batch()).unwrap();
        for k in 0..lq.nodes - 1 {
            worst = worst.max((&it.us[k] - &us_ref[k]).norm());
            worst = worst.max((&it.xs[k + 1] - &xs_ref[k + 1]).norm());
        }
    }
    VerifyRow { name: "lqr analytic match".into(), passed: worst < 1e-8, worst, tolerance: 1e-8, samples: 10 }
}

/// Geometric grid arithmetic: last interval and horizon.
pub fn grid_arithmetic() -> VerifyRow {
    let gamma = 10f64.powf(1.0 / 13.0);
    let grid = make_time_grid(15, 0.01, gamma).unwrap();
    let last_err = (grid.steps[13] - 0.1).abs();
    let horizon_err = (grid.horizon() - 0.56).abs();
    let uniform = make_time_grid(15, 0.04, 1.0).unwrap();
    let uniform_err = (uniform.horizon() - 0.56).abs();
    let worst = last_err.max(uniform_err);
    VerifyRow {
        name: "adaptive grid arithmetic".into(),
        passed: last_err < 1e-4 && horizon_err < 0.01 && uniform_err < 1e-12,
        worst,
        tolerance: 1e-4,
        samples: 1,
    }
}

/// Decision-variable counts across all six formulations.
pub fn variable_counts(tree: &std::sync::Arc<KinematicTree>) -> VerifyRow {
    let expected = [1226usize, 1094, 938, 854, 1178, 1094];
    let nominal = crate::assets::nominal_configuration(tree);
    let state = crate::model::RobotState { q: nominal.clone(), v: DVector::zeros(tree.nv()) };
    let gait = crate::ocp::gait::GaitSchedule::trot(0.8, 0.08);
    let mut worst = 0.0_f64;
    let mut ok = true;
    for (f, want) in Formulation::ALL.iter().zip(expected.iter()) {
        let grid = make_time_grid(15, 0.01, 10f64.powf(1.0 / 13.0)).unwrap();
        let problem = crate::ocp::build_ocp(
            *f,
            tree,
            grid,
            &gait,
            &Default::default(),
            &Default::default(),
            0.7,
            &nominal,
            &state,
            0.0,
        )
        .unwrap();
        let got = problem.decision_variable_count();
        let cross = count_via_solver_dims(&problem);
        if got != *want || cross != *want {
            ok = false;
            worst = worst.max((got as f64 - *want as f64).abs());
        }
    }
    VerifyRow { name: "table variable counts".into(), passed: ok, worst, tolerance: 0.0, samples: 6 }
}

/// Independent count through the solver-facing stage dimensions.
pub fn count_via_solver_dims(problem: &crate::ocp::OcpProblem) -> usize {
    use crate::solver::StageOcp;
    let n = problem.num_nodes();
    let mut total = n * problem.state_dim();
    for k in 0..n - 1 {
        total += problem.input_dim(k);
    }
    total
}

fn random_spd(n: usize, rng: &mut StdRng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n)
}

fn random_stage_blocks(nx: usize, nu: usize, m_eq: usize, rng: &mut StdRng) -> riccati::StageBlocks {
    riccati::StageBlocks {
        q: random_spd(nx, rng),
        s: DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-0.3..0.3)),
        r: random_spd(nu, rng),
        q_vec: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
        r_vec: DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0)),
        a: DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.5..0.5)),
        b: DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-0.5..0.5)),
        d: DVector::from_fn(nx, |_, _| rng.random_range(-0.2..0.2)),
        c_x: DMatrix::from_fn(m_eq, nx, |_, _| rng.random_range(-0.5..0.5)),
        c_u: DMatrix::from_fn(m_eq, nu, |_, _| rng.random_range(-0.5..0.5)) + DMatrix::identity(m_eq, nu),
        c: DVector::from_fn(m_eq, |_, _| rng.random_range(-0.3..0.3)),
    }
}

/// Dense block-KKT factorization used as the Riccati oracle.
fn dense_kkt_direction(
    stages: &[riccati::StageBlocks],
    terminal: &riccati::TerminalBlocks,
    dx0: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n_stages = stages.len();
    let nx = terminal.q.nrows();
    let mut var_of_u = Vec::new();
    let mut var_of_x = vec![usize::MAX];
    let mut nvar = 0;
    for st in stages {
        var_of_u.push(nvar);
        nvar += st.b.ncols();
        var_of_x.push(nvar);
        nvar += nx;
    }
    let mut ncon = 0;
    let mut row_of_dyn = Vec::new();
    let mut row_of_eq = Vec::new();
    for st in stages {
        row_of_dyn.push(ncon);
        ncon += nx;
        row_of_eq.push(ncon);
        ncon += st.c.len();
    }
    let dim = nvar + ncon;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (k, st) in stages.iter().enumerate() {
        let ui = var_of_u[k];
        let nu = st.b.ncols();
        kkt.view_mut((ui, ui), (nu, nu)).copy_from(&st.r);
        rhs.rows_mut(ui, nu).copy_from(&(-&st.r_vec));
        if k == 0 {
            let extra = st.s.transpose() * dx0;
            let cur = rhs.rows(ui, nu).clone_owned();
            rhs.rows_mut(ui, nu).copy_from(&(cur - extra));
        } else {
            let xi = var_of_x[k];
            kkt.view_mut((xi, xi), (nx, nx)).copy_from(&st.q);
            kkt.view_mut((xi, ui), (nx, nu)).copy_from(&st.s);
            kkt.view_mut((ui, xi), (nu, nx)).copy_from(&st.s.transpose());
            rhs.rows_mut(xi, nx).copy_from(&(-&st.q_vec));
        }
    }
    let xi = var_of_x[n_stages];
    kkt.view_mut((xi, xi), (nx, nx)).copy_from(&terminal.q);
    rhs.rows_mut(xi, nx).copy_from(&(-&terminal.q_vec));
    for (k, st) in stages.iter().enumerate() {
        let r = nvar + row_of_dyn[k];
        let ui = var_of_u[k];
        let nu = st.b.ncols();
        kkt.view_mut((r, ui), (nx, nu)).copy_from(&st.b);
        kkt.view_mut((r, var_of_x[k + 1]), (nx, nx))
            .copy_from(&(-DMatrix::<f64>::identity(nx, nx)));
        let mut d_rhs = -&st.d;
        if k == 0 {
            d_rhs -= &st.a * dx0;
        } else {
            kkt.view_mut((r, var_of_x[k]), (nx, nx)).copy_from(&st.a);
        }
        rhs.rows_mut(r, nx).copy_from(&d_rhs);
        let m = st.c.len();
        if m > 0 {
            let r = nvar + row_of_eq[k];
            kkt.view_mut((r, ui), (m, nu)).copy_from(&st.c_u);
            let mut c_rhs = -&st.c;
            if k == 0 {
                c_rhs -= &st.c_x * dx0;
            } else {
                kkt.view_mut((r, var_of_x[k]), (m, nx)).copy_from(&st.c_x);
            }
            rhs.rows_mut(r, m).copy_from(&c_rhs);
        }
    }
    for r in nvar..dim {
        for c in 0..nvar {
            kkt[(c, r)] = kkt[(r, c)];
        }
    }
    let sol = kkt.lu().solve(&rhs).expect("dense KKT solvable");
    let mut dx = vec![dx0.clone()];
    let mut du = Vec::new();
    for (k, st) in stages.iter().enumerate() {
        du.push(sol.rows(var_of_u[k], st.b.ncols()).clone_owned());
        dx.push(sol.rows(var_of_x[k + 1], nx).clone_owned());
    }
    (dx, du)
}

/// Run every oracle suite against a tree (normally the bundled model).
pub fn run_suites(tree: &std::sync::Arc<KinematicTree>, seed: u64) -> VerifyReport {
    let rows = vec![
        fd_id_identity(tree, seed, 1000),
        rnea_composition(tree, seed, 1000),
        derivative_check(tree, seed, 100),
        riccati_vs_dense(seed, 100),
        lqr_match(seed),
        grid_arithmetic(),
        variable_counts(tree),
    ];
    VerifyReport { seed, rows }
}
