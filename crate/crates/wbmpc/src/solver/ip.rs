//! Interior-point iteration over a [`StageOcp`].
//!
//! State-only equality constraints at node `k+1` are imposed through the
//! dynamics at stage `k`, which keeps every stage equality full row rank in
//! the inputs so the Riccati elimination applies. Inequalities enter through
//! primal-dual barrier terms folded into the stage Hessians.

use super::problem::{ConstraintLin, CostQuad, StageOcp, StateConstraintLin, TransitionLin};
use super::riccati::{riccati_solve, RiccatiError, StageBlocks, TerminalBlocks};
use super::{ConvergenceStatus, SolverSettings, SolverStats};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("problem has fewer than two nodes")]
    TooFewNodes,
}

/// Full primal-dual iterate of the stage NLP.
#[derive(Clone, Debug)]
pub struct Iterate {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    /// Dynamics multipliers for nodes 1..N-1.
    pub lambda: Vec<DVector<f64>>,
    /// Stage equality multipliers.
    pub nu: Vec<DVector<f64>>,
    /// State equality multipliers, indexed by node (0 unused).
    pub eta: Vec<DVector<f64>>,
    /// Stage inequality slacks/duals.
    pub s_stage: Vec<DVector<f64>>,
    pub z_stage: Vec<DVector<f64>>,
    /// State inequality slacks/duals, indexed by node (0 unused).
    pub s_state: Vec<DVector<f64>>,
    pub z_state: Vec<DVector<f64>>,
    pub mu: f64,
}

impl Iterate {
    /// Primal-only iterate; multipliers zero, slacks filled in by the solver.
    pub fn from_primal(xs: Vec<DVector<f64>>, us: Vec<DVector<f64>>) -> Self {
        Self {
            xs,
            us,
            lambda: Vec::new(),
            nu: Vec::new(),
            eta: Vec::new(),
            s_stage: Vec::new(),
            z_stage: Vec::new(),
            s_state: Vec::new(),
            z_state: Vec::new(),
            mu: 0.0,
        }
    }
}

struct Linearization {
    cost: Vec<CostQuad>,
    trans: Vec<TransitionLin>,
    stage_eq: Vec<ConstraintLin>,
    state_eq: Vec<StateConstraintLin>,
    stage_ineq: Vec<ConstraintLin>,
    state_ineq: Vec<StateConstraintLin>,
}

fn linearize(p: &dyn StageOcp, it: &Iterate) -> Linearization {
    let n = p.num_nodes();
    let mut cost = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n - 1);
    let mut stage_eq = Vec::with_capacity(n - 1);
    let mut stage_ineq = Vec::with_capacity(n - 1);
    let mut state_eq = Vec::with_capacity(n);
    let mut state_ineq = Vec::with_capacity(n);
    // Node-0 state groups are never used (the state is pinned).
    state_eq.push(StateConstraintLin { value: DVector::zeros(0), jx: DMatrix::zeros(0, p.state_dim()) });
    state_ineq.push(StateConstraintLin { value: DVector::zeros(0), jx: DMatrix::zeros(0, p.state_dim()) });
    for k in 0..n - 1 {
        cost.push(p.cost_quadratic(k, &it.xs[k], Some(&it.us[k])));
        trans.push(p.transition_linearized(k, &it.xs[k], &it.us[k]));
        stage_eq.push(p.stage_eq_linearized(k, &it.xs[k], &it.us[k]));
        stage_ineq.push(p.stage_ineq_linearized(k, &it.xs[k], &it.us[k]));
        if k >= 1 {
            state_eq.push(p.state_eq_linearized(k, &it.xs[k]));
            state_ineq.push(p.state_ineq_linearized(k, &it.xs[k]));
        }
    }
    cost.push(p.cost_quadratic(n - 1, &it.xs[n - 1], None));
    state_eq.push(p.state_eq_linearized(n - 1, &it.xs[n - 1]));
    state_ineq.push(p.state_ineq_linearized(n - 1, &it.xs[n - 1]));
    Linearization { cost, trans, stage_eq, state_eq, stage_ineq, state_ineq }
}

/// Max-norm KKT residual for barrier parameter `mu` (0 for the outer test).
fn kkt_residual(p: &dyn StageOcp, it: &Iterate, lin: &Linearization, mu: f64) -> f64 {
    let n = p.num_nodes();
    let mut worst: f64 = 0.0;
    let mut upd = |v: f64| worst = f64::max(worst, v.abs());
    let trace = std::env::var("WBMPC_KKT_TRACE").is_ok() && mu == 0.0;
    let mut cat = |name: &str, k: usize, v: f64| {
        if trace && v.abs() > 1e-3 {
            eprintln!("  kkt {} k={} |r|={:.3e}", name, k, v.abs());
        }
    };

    for k in 0..n - 1 {
        // Stationarity in u_k.
        let mut r_u = lin.cost[k].grad_u.clone();
        r_u -= lin.trans[k].b.transpose() * &it.lambda[k];
        if lin.stage_eq[k].value.len() > 0 {
            r_u -= lin.stage_eq[k].ju.transpose() * &it.nu[k];
        }
        if lin.stage_ineq[k].value.len() > 0 {
            r_u -= lin.stage_ineq[k].ju.transpose() * &it.z_stage[k];
        }
        r_u.iter().for_each(|v| upd(*v));
        cat("stat_u", k, r_u.amax());

        // Stationarity in x_k for interior nodes.
        if k >= 1 {
            let mut r_x = lin.cost[k].grad_x.clone();
            r_x += &it.lambda[k - 1];
            r_x -= lin.trans[k].a.transpose() * &it.lambda[k];
            if lin.stage_eq[k].value.len() > 0 {
                r_x -= lin.stage_eq[k].jx.transpose() * &it.nu[k];
            }
            if lin.state_eq[k].value.len() > 0 {
                r_x -= lin.state_eq[k].jx.transpose() * &it.eta[k];
            }
            if lin.stage_ineq[k].value.len() > 0 {
                r_x -= lin.stage_ineq[k].jx.transpose() * &it.z_stage[k];
            }
            if lin.state_ineq[k].value.len() > 0 {
                let z_implied = DVector::from_fn(lin.state_ineq[k].value.len(), |i, _| {
                    it.mu / lin.state_ineq[k].value[i].max(1e-12)
                });
                r_x -= lin.state_ineq[k].jx.transpose() * &z_implied;
            }
            r_x.iter().for_each(|v| upd(*v));
            cat("stat_x", k, r_x.amax());
        }

        // Dynamics defect and equality residuals.
        let dyn_res = &lin.trans[k].value - &it.xs[k + 1];
        dyn_res.iter().for_each(|v| upd(*v));
        if dyn_res.len() > 0 { cat("dyn", k, dyn_res.amax()); }
        lin.stage_eq[k].value.iter().for_each(|v| upd(*v));
        if lin.stage_eq[k].value.len() > 0 { cat("stage_eq", k, lin.stage_eq[k].value.amax()); }
        // Inequality primal feasibility and complementarity.
        for i in 0..lin.stage_ineq[k].value.len() {
            upd(lin.stage_ineq[k].value[i] - it.s_stage[k][i]);
            cat("ineq_p", k, lin.stage_ineq[k].value[i] - it.s_stage[k][i]);
            upd(it.s_stage[k][i] * it.z_stage[k][i] - mu);
            cat("comp", k, it.s_stage[k][i] * it.z_stage[k][i] - mu);
        }
    }
    // Terminal stationarity.
    let last = n - 1;
    let mut r_x = lin.cost[last].grad_x.clone();
    r_x += &it.lambda[last - 1];
    if lin.state_eq[last].value.len() > 0 {
        r_x -= lin.state_eq[last].jx.transpose() * &it.eta[last];
    }
    if lin.state_ineq[last].value.len() > 0 {
        let z_implied = DVector::from_fn(lin.state_ineq[last].value.len(), |i, _| {
            it.mu / lin.state_ineq[last].value[i].max(1e-12)
        });
        r_x -= lin.state_ineq[last].jx.transpose() * &z_implied;
    }
    r_x.iter().for_each(|v| upd(*v));
    cat("stat_xN", n - 1, r_x.amax());

    for k in 1..n {
        lin.state_eq[k].value.iter().for_each(|v| upd(*v));
        if lin.state_eq[k].value.len() > 0 { cat("state_eq", k, lin.state_eq[k].value.amax()); }
        for i in 0..lin.state_ineq[k].value.len() {
            // Interior violations surface as primal infeasibility.
            upd((-lin.state_ineq[k].value[i]).max(0.0));
        }
    }
    worst
}

/// Barrier fold of one inequality group into quadratic blocks.
struct BarrierFold {
    sigma: DVector<f64>,
    w_vec: DVector<f64>,
}

fn barrier_fold(g: &DVector<f64>, s: &DVector<f64>, z: &DVector<f64>, mu: f64) -> BarrierFold {
    let m = g.len();
    let mut sigma = DVector::zeros(m);
    let mut w_vec = DVector::zeros(m);
    for i in 0..m {
        // Guard against collapsed slacks: cap the barrier curvature so the
        // fold stays finite (the fraction-to-boundary rule keeps slacks
        // positive, but near-infeasible problems can drive them tiny).
        let si = s[i].max(1e-10);
        let zi = z[i].min(1e10);
        sigma[i] = (zi / si).min(1e12);
        let r_p = g[i] - si;
        w_vec[i] = (sigma[i] * r_p - mu / si).clamp(-1e12, 1e12);
    }
    BarrierFold { sigma, w_vec }
}

fn sigma_weighted(jx: &DMatrix<f64>, sigma: &DVector<f64>) -> DMatrix<f64> {
    let mut out = jx.clone();
    for (r, s) in sigma.iter().enumerate() {
        for c in 0..out.ncols() {
            out[(r, c)] *= *s;
        }
    }
    out
}

/// l1 constraint violation at the current values.
fn constraint_violation(p: &dyn StageOcp, xs: &[DVector<f64>], us: &[DVector<f64>], s_stage: &[DVector<f64>], s_state: &[DVector<f64>]) -> f64 {
    let trace = std::env::var("WBMPC_THETA_TRACE").is_ok();
    let n = p.num_nodes();
    let mut theta = 0.0;
    for k in 0..n - 1 {
        let a = (p.transition_value(k, &xs[k], &us[k]) - &xs[k + 1]).abs().sum();
        let b = p.stage_eq_value(k, &xs[k], &us[k]).abs().sum();
        let g = p.stage_ineq_value(k, &xs[k], &us[k]);
        let c = (&g - &s_stage[k]).abs().sum();
        if trace && (a + b + c) > 1e-2 {
            eprintln!("    theta k={} dyn {:.2e} eq {:.2e} ineq {:.2e}", k, a, b, c);
        }
        theta += a + b + c;
    }
    for k in 1..n {
        let a = p.state_eq_value(k, &xs[k]).abs().sum();
        if trace && a > 1e-2 {
            eprintln!("    theta node={} steq {:.2e}", k, a);
        }
        theta += a;
    }
    let _ = s_state;
    theta
}

fn barrier_objective(p: &dyn StageOcp, xs: &[DVector<f64>], us: &[DVector<f64>], s_stage: &[DVector<f64>], s_state: &[DVector<f64>], mu: f64) -> f64 {
    let n = p.num_nodes();
    let mut f = 0.0;
    for k in 0..n - 1 {
        f += p.cost_value(k, &xs[k], Some(&us[k]));
        f -= mu * s_stage[k].iter().map(|s| s.ln()).sum::<f64>();
    }
    f += p.cost_value(n - 1, &xs[n - 1], None);
    let _ = s_state;
    for (k, x) in xs.iter().enumerate().skip(1) {
        let g = p.state_ineq_value(k, x);
        // Interior by construction; a clamped log keeps stray evaluations
        // finite during the search.
        f -= mu * g.iter().map(|v| v.max(1e-12).ln()).sum::<f64>();
    }
    f
}

/// Re-anchor a slack vector to the constraint values where possible: the
/// slack tracks `g(w)` exactly whenever `g` is positive, so the merit
/// function only penalizes genuine violations; for violated rows the
/// linearly stepped value (strictly positive by the fraction-to-boundary
/// rule) is kept so the barrier curvature stays bounded.
fn reanchor_slacks(g: &DVector<f64>, s_lin: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        if g[i] > 0.0 {
            g[i]
        } else {
            // Violated row: keep the slack on the scale of the violation so
            // the barrier stays finite and the row can still move.
            s_lin[i].max(1e-4 * (1.0 + g[i].abs()))
        }
    })
}

/// Fraction-to-boundary step cap: largest `alpha <= 1` with
/// `v + alpha dv >= (1 - tau) v`.
pub fn fraction_to_boundary(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-tau * v[i] / dv[i]);
        }
    }
    alpha
}

/// Solve the stage NLP. `warm` supplies a primal starting trajectory;
/// otherwise all states start at the pinned initial state and inputs at zero.
pub fn solve(
    p: &dyn StageOcp,
    warm: Option<&Iterate>,
    settings: &SolverSettings,
) -> Result<(Iterate, SolverStats), SolverError> {
    let t_start = std::time::Instant::now();
    let n = p.num_nodes();
    if n < 2 {
        return Err(SolverError::TooFewNodes);
    }
    let nx = p.state_dim();

    // Primal initialization.
    let x0 = p.initial_state();
    let mut it = match warm {
        Some(w) if settings.warm_start && w.xs.len() == n && w.us.len() == n - 1 && w.xs[0].len() == nx => {
            let mut c = Iterate::from_primal(w.xs.clone(), w.us.clone());
            c.xs[0] = x0.clone();
            c
        }
        _ => {
            let xs = vec![x0.clone(); n];
            let us = (0..n - 1).map(|k| DVector::zeros(p.input_dim(k))).collect();
            Iterate::from_primal(xs, us)
        }
    };
    let mut mu = settings.mu_init;
    it.mu = mu;

    // Multipliers and slacks, reset to safely interior values.
    it.lambda = (0..n - 1).map(|_| DVector::zeros(nx)).collect();
    it.nu = (0..n - 1).map(|k| DVector::zeros(p.stage_eq_dim(k) + p.state_eq_dim(k + 1))).collect();
    // nu holds only the own-stage part; the folded tail multipliers live in eta.
    it.nu = (0..n - 1).map(|k| DVector::zeros(p.stage_eq_dim(k))).collect();
    it.eta = (0..n).map(|k| DVector::zeros(if k >= 1 { p.state_eq_dim(k) } else { 0 })).collect();
    let s_min = 1e-4;
    it.s_stage = Vec::new();
    it.z_stage = Vec::new();
    for k in 0..n - 1 {
        let g = p.stage_ineq_value(k, &it.xs[k], &it.us[k]);
        let s = g.map(|v| v.max(s_min));
        let z = s.map(|si| (mu / si).clamp(1e-8, 1e8));
        it.s_stage.push(s);
        it.z_stage.push(z);
    }
    // State inequalities are handled with a primal log-barrier: iterates at
    // nodes >= 1 are kept strictly interior (their rows are linear, so both
    // the initial projection and the step cap are exact). The slack/dual
    // vectors stay empty.
    it.s_state = vec![DVector::zeros(0); n];
    it.z_state = vec![DVector::zeros(0); n];
    for k in 1..n {
        let lin = p.state_ineq_linearized(k, &it.xs[k]);
        if lin.value.len() == 0 {
            continue;
        }
        for i in 0..lin.value.len() {
            if lin.value[i] < 1e-3 {
                // Push along the (unit-selector) row to restore margin.
                let row = lin.jx.row(i);
                let nrm2 = row.norm_squared();
                if nrm2 > 1e-12 {
                    let shift = (1e-3 - lin.value[i]) / nrm2;
                    for j in 0..it.xs[k].len() {
                        it.xs[k][j] += shift * row[j];
                    }
                }
            }
        }
    }

    let mut stats = SolverStats {
        iterations: 0,
        kkt_residual: f64::INFINITY,
        solve_time: 0.0,
        step_sizes: Vec::new(),
        status: ConvergenceStatus::MaxIterations,
        regularization: 0.0,
    };
    let mut best: Option<(Iterate, f64)> = None;
    let mut rho: f64 = 10.0; // l1 merit penalty weight
    // Feasibility-restoration mode: entered when the merit line search
    // fails; the cost model is muted and steps are accepted on violation
    // decrease alone until the violation has dropped an order of magnitude.
    let mut restoring = false;
    let mut restore_entry_theta = f64::INFINITY;
    // Adaptive proximal (Levenberg-Marquardt) damping: grows when the line
    // search struggles so the next direction stays inside the region where
    // the Gauss-Newton model is trustworthy, and decays on clean steps.
    let mut lm: f64 = 0.0;

    let timing = std::env::var("WBMPC_IP_TIMING").is_ok();
    let trace = std::env::var("WBMPC_IP_TRACE").is_ok();
    for iter in 0..=settings.max_iterations {
        let t_lin = std::time::Instant::now();
        let lin = linearize(p, &it);
        let lin_ms = t_lin.elapsed().as_secs_f64() * 1e3;
        let kkt0 = kkt_residual(p, &it, &lin, 0.0);
        if let Some(sink) = &settings.diagnostics {
            sink.lock().unwrap().push(format!("{},{:.3e},{:.3e}", iter, kkt0, mu));
        }
        if best.as_ref().map(|(_, b)| kkt0 < *b).unwrap_or(true) {
            best = Some((it.clone(), kkt0));
        }
        stats.kkt_residual = kkt0;
        if kkt0 <= settings.tolerance {
            stats.status = ConvergenceStatus::Converged;
            stats.iterations = iter;
            break;
        }
        if iter == settings.max_iterations {
            stats.iterations = iter;
            break;
        }

        // Barrier update (monotone Fiacco-McCormick).
        let kkt_mu = kkt_residual(p, &it, &lin, mu);
        if kkt_mu <= 10.0 * mu {
            mu = (settings.tolerance / 100.0).max((settings.mu_reduction * mu).min(mu.powf(1.5)));
            it.mu = mu;
        }

        // Assemble stage blocks with barrier folds and state-equality folding.
        let mut stages = Vec::with_capacity(n - 1);
        let mut eq_row_scales: Vec<DVector<f64>> = Vec::with_capacity(n - 1);
        let cost_scale = if restoring { 1e-6 } else { 1.0 };
        for k in 0..n - 1 {
            let nu_k = p.input_dim(k);
            let c = &lin.cost[k];
            let mut q = cost_scale * &c.hess_xx;
            let mut s_xu = cost_scale * &c.hess_xu;
            let mut r = cost_scale * &c.hess_uu;
            let mut q_vec = cost_scale * &c.grad_x;
            let mut r_vec = cost_scale * &c.grad_u;
            if restoring {
                // Keep a sane floor so the input blocks stay positive.
                for i in 0..nu_k {
                    r[(i, i)] += 1e-4;
                }
                for i in 0..nx {
                    q[(i, i)] += 1e-6;
                }
            }

            if lin.stage_ineq[k].value.len() > 0 {
                let fold = barrier_fold(&lin.stage_ineq[k].value, &it.s_stage[k], &it.z_stage[k], mu);
                let gx = &lin.stage_ineq[k].jx;
                let gu = &lin.stage_ineq[k].ju;
                let sgx = sigma_weighted(gx, &fold.sigma);
                let sgu = sigma_weighted(gu, &fold.sigma);
                q += gx.transpose() * &sgx;
                s_xu += gx.transpose() * &sgu;
                r += gu.transpose() * &sgu;
                q_vec += gx.transpose() * &fold.w_vec;
                r_vec += gu.transpose() * &fold.w_vec;
            }
            if k >= 1 && lin.state_ineq[k].value.len() > 0 {
                // Primal log-barrier on the (strictly interior) state rows.
                let gx = &lin.state_ineq[k].jx;
                let g = &lin.state_ineq[k].value;
                let sigma = DVector::from_fn(g.len(), |i, _| mu / (g[i] * g[i]));
                let w_vec = DVector::from_fn(g.len(), |i, _| -mu / g[i]);
                let sgx = sigma_weighted(gx, &sigma);
                q += gx.transpose() * &sgx;
                q_vec += gx.transpose() * &w_vec;
            }

            // Stage equalities plus next-node state equalities through the
            // dynamics.
            let m_own = lin.stage_eq[k].value.len();
            let m_next = lin.state_eq[k + 1].value.len();
            let a = &lin.trans[k].a;
            let b = &lin.trans[k].b;
            let defect = &lin.trans[k].value - &it.xs[k + 1];
            let mut c_x = DMatrix::zeros(m_own + m_next, nx);
            let mut c_u = DMatrix::zeros(m_own + m_next, nu_k);
            let mut c_val = DVector::zeros(m_own + m_next);
            if m_own > 0 {
                c_x.view_mut((0, 0), (m_own, nx)).copy_from(&lin.stage_eq[k].jx);
                c_u.view_mut((0, 0), (m_own, nu_k)).copy_from(&lin.stage_eq[k].ju);
                c_val.rows_mut(0, m_own).copy_from(&lin.stage_eq[k].value);
            }
            if m_next > 0 {
                let m_jx = &lin.state_eq[k + 1].jx;
                c_x.view_mut((m_own, 0), (m_next, nx)).copy_from(&(m_jx * a));
                c_u.view_mut((m_own, 0), (m_next, nu_k)).copy_from(&(m_jx * b));
                c_val
                    .rows_mut(m_own, m_next)
                    .copy_from(&(&lin.state_eq[k + 1].value + m_jx * &defect));
            }
            // Row equilibration: inverse-dynamics rows carry mass-matrix
            // magnitudes while folded velocity rows carry a factor dt; mixed
            // scales wreck the elimination's conditioning. Multipliers are
            // unscaled on extraction below.
            let mut row_scale = DVector::from_element(m_own + m_next, 1.0);
            for i in 0..m_own + m_next {
                let norm = (c_x.row(i).norm_squared() + c_u.row(i).norm_squared()).sqrt();
                if norm > 1e-12 {
                    let sc = 1.0 / norm;
                    row_scale[i] = sc;
                    for j in 0..nx {
                        c_x[(i, j)] *= sc;
                    }
                    for j in 0..nu_k {
                        c_u[(i, j)] *= sc;
                    }
                    c_val[i] *= sc;
                }
            }
            eq_row_scales.push(row_scale);

            let mut q = q;
            let mut s_xu = s_xu;
            let mut r = r;
            if settings.equality_damping > 0.0 && c_val.len() > 0 {
                let sg = settings.equality_damping;
                q += sg * c_x.transpose() * &c_x;
                s_xu += sg * c_x.transpose() * &c_u;
                r += sg * c_u.transpose() * &c_u;
            }
            stages.push(StageBlocks {
                q,
                s: s_xu,
                r,
                q_vec,
                r_vec,
                a: a.clone(),
                b: b.clone(),
                d: defect,
                c_x,
                c_u,
                c: c_val,
            });
        }
        let mut term_q = cost_scale * &lin.cost[n - 1].hess_xx;
        let mut term_qv = cost_scale * &lin.cost[n - 1].grad_x;
        if restoring {
            for i in 0..nx {
                term_q[(i, i)] += 1e-6;
            }
        }

        if lin.state_ineq[n - 1].value.len() > 0 {
            let gx = &lin.state_ineq[n - 1].jx;
            let g = &lin.state_ineq[n - 1].value;
            let sigma = DVector::from_fn(g.len(), |i, _| mu / (g[i] * g[i]));
            let w_vec = DVector::from_fn(g.len(), |i, _| -mu / g[i]);
            let sgx = sigma_weighted(gx, &sigma);
            term_q += gx.transpose() * &sgx;
            term_qv += gx.transpose() * &w_vec;
        }

        let t_ric = std::time::Instant::now();
        // Trust-region style cap on the state direction: a step that moves
        // any state coordinate by more than `dx_cap` is outside the region
        // where the Gauss-Newton model can be trusted, so re-solve with more
        // proximal damping instead of letting the line search discover it.
        let dx_cap = 3.0;
        let mut sol;
        loop {
            let mut st = stages.clone();
            let mut tq = term_q.clone();
            if lm > 0.0 {
                for blk in st.iter_mut() {
                    for i in 0..blk.q.nrows() {
                        blk.q[(i, i)] += lm;
                    }
                    for i in 0..blk.r.nrows() {
                        blk.r[(i, i)] += lm;
                    }
                }
                for i in 0..nx {
                    tq[(i, i)] += lm;
                }
            }
            sol = riccati_solve(
                &st,
                &TerminalBlocks { q: tq, q_vec: term_qv.clone() },
                &DVector::zeros(nx),
                settings.regularization_floor,
            )?;
            let dx_inf = sol.dx.iter().flat_map(|v| v.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
            if dx_inf <= dx_cap || lm >= 1e6 {
                if trace && dx_inf > dx_cap {
                    for (k, dxk) in sol.dx.iter().enumerate() {
                        let mx = dxk.amax();
                        if mx > 0.5 * dx_inf {
                            let idx = dxk.iter().enumerate().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).map(|(i, _)| i).unwrap();
                            eprintln!("   big dx at node {} coord {} = {:.3e}", k, idx, dxk[idx]);
                        }
                    }
                }
                break;
            }
            lm = (lm * 10.0).max(1e-2);
            if trace {
                eprintln!("   capping direction |dx| {:.2e}: damping -> {:.1e}", dx_inf, lm);
            }
        }
        let sol = sol;
        let ric_ms = t_ric.elapsed().as_secs_f64() * 1e3;
        if std::env::var("WBMPC_DIR_CHECK").is_ok() {
            let mut worst_lin = 0.0_f64;
            let mut worst_dyn = 0.0_f64;
            for k in 0..stages.len() {
                let r = &stages[k].c_x * &sol.dx[k] + &stages[k].c_u * &sol.du[k] + &stages[k].c;
                if r.len() > 0 {
                    worst_lin = worst_lin.max(r.amax());
                }
                let rd = &stages[k].a * &sol.dx[k] + &stages[k].b * &sol.du[k] + &stages[k].d - &sol.dx[k + 1];
                worst_dyn = worst_dyn.max(rd.amax());
            }
            let numax = sol.nu.iter().flat_map(|v| v.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
            eprintln!("  dircheck it {}: |C dz + c| {:.2e} |dyn| {:.2e} |nu| {:.2e} |du| {:.2e}",
                iter, worst_lin, worst_dyn, numax,
                sol.du.iter().flat_map(|v| v.iter()).fold(0.0_f64, |m, v| m.max(v.abs())));
        }
        stats.regularization = stats.regularization.max(sol.regularization);

        // Slack and dual directions, fraction-to-boundary caps.
        let tau = settings.fraction_to_boundary;
        #[allow(unused_mut)]
        let mut alpha_primal: f64 = 1.0;
        let mut alpha_dual: f64 = 1.0;
        let mut ds_stage = Vec::with_capacity(n - 1);
        let mut dz_stage = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let m = lin.stage_ineq[k].value.len();
            if m == 0 {
                ds_stage.push(DVector::zeros(0));
                dz_stage.push(DVector::zeros(0));
                continue;
            }
            let ds = &lin.stage_ineq[k].jx * &sol.dx[k]
                + &lin.stage_ineq[k].ju * &sol.du[k]
                + (&lin.stage_ineq[k].value - &it.s_stage[k]);
            let mut dz = DVector::zeros(m);
            for i in 0..m {
                dz[i] = (mu - it.s_stage[k][i] * it.z_stage[k][i] - it.z_stage[k][i] * ds[i]) / it.s_stage[k][i];
            }
            let cap = fraction_to_boundary(&it.s_stage[k], &ds, tau);
            if trace && cap < 0.1 {
                for i in 0..m {
                    if ds[i] < 0.0 && -tau * it.s_stage[k][i] / ds[i] < 0.1 {
                        eprintln!("  ftb block: stage {} ineq row {} s {:.2e} ds {:.2e}", k, i, it.s_stage[k][i], ds[i]);
                    }
                }
            }
            alpha_primal = alpha_primal.min(cap);
            alpha_dual = alpha_dual.min(fraction_to_boundary(&it.z_stage[k], &dz, tau));
            ds_stage.push(ds);
            dz_stage.push(dz);
        }
        for k in 1..n {
            let m = lin.state_ineq[k].value.len();
            if m == 0 {
                continue;
            }
            // Exact step cap for the linear interior bound rows.
            let dg = &lin.state_ineq[k].jx * &sol.dx[k];
            let cap = fraction_to_boundary(&lin.state_ineq[k].value, &dg, tau);
            if trace && cap < 0.1 {
                eprintln!("  ftb block: node {} interior bound cap {:.2e}", k, cap);
            }
            alpha_primal = alpha_primal.min(cap);
        }

        // New multiplier values implied by the step (full values, not deltas).
        let mut lambda_new = Vec::with_capacity(n - 1);
        let mut nu_new = Vec::with_capacity(n - 1);
        let mut eta_new: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
        for k in 0..n - 1 {
            let m_own = p.stage_eq_dim(k);
            let m_next = p.state_eq_dim(k + 1);
            // Undo the row equilibration so multipliers refer to the
            // original constraint rows.
            let mut full = sol.nu[k].clone();
            for i in 0..full.len() {
                full[i] *= eq_row_scales[k][i];
            }
            nu_new.push(-full.rows(0, m_own).clone_owned());
            let eta_k1 = -full.rows(m_own, m_next).clone_owned();
            // Unfold: the original dynamics multiplier absorbs the folded
            // state-equality rows, lambda = -(lambda_riccati + M' nu_tail).
            let mut lam = -sol.lambda[k].clone();
            if m_next > 0 {
                lam += lin.state_eq[k + 1].jx.transpose() * &eta_k1;
            }
            eta_new[k + 1] = eta_k1;
            lambda_new.push(lam);
        }

        // Merit line search on the l1-penalized barrier objective.
        let mult_inf = lambda_new
            .iter()
            .chain(nu_new.iter())
            .chain(eta_new.iter())
            .flat_map(|v| v.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        rho = f64::max(0.5 * rho, (1.5 * mult_inf + 1.0).min(1e6)).max(10.0);

        let theta0 = constraint_violation(p, &it.xs, &it.us, &it.s_stage, &it.s_state);
        let f0 = barrier_objective(p, &it.xs, &it.us, &it.s_stage, &it.s_state, mu);
        let phi0 = f0 + rho * theta0;
        // Directional derivative estimate: cost gradient term minus the
        // penalty on the (linearly vanishing) violation.
        let mut dir_grad: f64 = 0.0;
        for k in 0..n - 1 {
            dir_grad += lin.cost[k].grad_x.dot(&sol.dx[k]) + lin.cost[k].grad_u.dot(&sol.du[k]);
            for i in 0..ds_stage[k].len() {
                dir_grad -= mu * ds_stage[k][i] / it.s_stage[k][i];
            }
        }
        dir_grad += lin.cost[n - 1].grad_x.dot(&sol.dx[n - 1]);
        for k in 1..n {
            if lin.state_ineq[k].value.len() > 0 {
                let dg = &lin.state_ineq[k].jx * &sol.dx[k];
                for i in 0..dg.len() {
                    dir_grad -= mu * dg[i] / lin.state_ineq[k].value[i].max(1e-12);
                }
            }
        }
        let mut d_phi = dir_grad - rho * theta0;
        if d_phi > -1e-14 {
            d_phi = -theta0.max(1e-14);
        }

        // A vanishing direction (already optimal for this barrier value)
        // needs no search; take it and let the multipliers update.
        let step_inf = sol
            .dx
            .iter()
            .chain(sol.du.iter())
            .flat_map(|v| v.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));

        if trace {
            for k in 0..n - 1 {
                let mx = sol.dx[k + 1].amax();
                let mu_ = sol.du[k].amax();
                if mx > 0.05 || mu_ > 0.05 {
                    let ix = sol.dx[k + 1].iter().enumerate().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).map(|(i, _)| i).unwrap_or(0);
                    let iu = sol.du[k].iter().enumerate().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).map(|(i, _)| i).unwrap_or(0);
                    eprintln!("  big dir: node {} |dx|={:.2e}@{} |du|={:.2e}@{}", k + 1, mx, ix, mu_, iu);
                }
            }
        }
        if trace {
            eprintln!(
                "it {} kkt0 {:.2e} mu {:.1e} f0 {:.4e} theta0 {:.3e} rho {:.1e} dphi {:.3e} a_max {:.2e} step_inf {:.2e}",
                iter, kkt0, mu, f0, theta0, rho, d_phi, alpha_primal, step_inf
            );
        }
        // Second-order correction: when the full step is rejected because
        // constraint curvature blows up the violation, re-solve the same KKT
        // system with the constraint values re-evaluated at the trial point
        // and add the correction to the step.
        let mut soc_tried = false;
        let mut sol = sol;

        let mut alpha = alpha_primal;
        let mut accepted = step_inf < 1e-12;
        let mut trial = it.clone();
        if accepted {
            for k in 0..n - 1 {
                let s_lin = &it.s_stage[k] + alpha * &ds_stage[k];
                let g = p.stage_ineq_value(k, &trial.xs[k], &trial.us[k]);
                trial.s_stage[k] = reanchor_slacks(&g, &s_lin);
            }
        }
        while !accepted && alpha > 1e-10 {
            for k in 0..n - 1 {
                trial.xs[k] = &it.xs[k] + alpha * &sol.dx[k];
                trial.us[k] = &it.us[k] + alpha * &sol.du[k];
            }
            trial.xs[n - 1] = &it.xs[n - 1] + alpha * &sol.dx[n - 1];
            for k in 0..n - 1 {
                let s_lin = &it.s_stage[k] + alpha * &ds_stage[k];
                let g = p.stage_ineq_value(k, &trial.xs[k], &trial.us[k]);
                trial.s_stage[k] = reanchor_slacks(&g, &s_lin);
            }
            let theta_t = constraint_violation(p, &trial.xs, &trial.us, &trial.s_stage, &trial.s_state);
            let f_t = barrier_objective(p, &trial.xs, &trial.us, &trial.s_stage, &trial.s_state, mu);
            let phi_t = f_t + rho * theta_t;
            if trace {
                eprintln!(
                    "   alpha {:.3e}: f {:.5e} theta {:.3e} dphi_req {:.3e} dphi_act {:.3e}",
                    alpha, f_t, theta_t, 1e-4 * alpha * d_phi, phi_t - phi0
                );
            }
            let acceptable = if restoring {
                theta_t <= (1.0 - 1e-3 * alpha) * theta0 + 1e-14
            } else {
                phi_t <= phi0 + 1e-4 * alpha * d_phi + 1e-14 * (1.0 + phi0.abs())
            };
            if acceptable {
                accepted = true;
                break;
            }
            if !soc_tried && alpha == alpha_primal && theta_t > theta0 {
                soc_tried = true;
                // Build corrected right-hand sides at the trial point.
                let mut soc_stages = stages.clone();
                let mut ok = true;
                for k in 0..n - 1 {
                    let defect_t = p.transition_value(k, &trial.xs[k], &trial.us[k]) - &trial.xs[k + 1];
                    let e_t = p.stage_eq_value(k, &trial.xs[k], &trial.us[k]);
                    let m_own = e_t.len();
                    let m_next = p.state_eq_dim(k + 1);
                    let mut c_t = DVector::zeros(m_own + m_next);
                    c_t.rows_mut(0, m_own).copy_from(&e_t);
                    if m_next > 0 {
                        let se_t = p.state_eq_value(k + 1, &trial.xs[k + 1]);
                        // The folded row value at the trial point, with the
                        // original Jacobian and the trial defect.
                        let folded = &se_t + &lin.state_eq[k + 1].jx * &defect_t;
                        c_t.rows_mut(m_own, m_next).copy_from(&folded);
                    }
                    for i in 0..c_t.len() {
                        c_t[i] *= eq_row_scales[k][i];
                    }
                    if !c_t.iter().all(|v| v.is_finite()) || !defect_t.iter().all(|v| v.is_finite()) {
                        ok = false;
                        break;
                    }
                    soc_stages[k].d = defect_t;
                    soc_stages[k].c = c_t;
                }
                if ok {
                    if let Ok(corr) = riccati_solve(
                        &soc_stages,
                        &TerminalBlocks { q: lin.cost[n - 1].hess_xx.clone(), q_vec: lin.cost[n - 1].grad_x.clone() },
                        &DVector::zeros(nx),
                        settings.regularization_floor,
                    ) {
                        // Combined direction and refreshed slack directions.
                        let mut sol2 = corr;
                        for k in 0..n {
                            sol2.dx[k] += &sol.dx[k];
                            if k < n - 1 {
                                sol2.du[k] += &sol.du[k];
                            }
                        }
                        sol2.nu = sol.nu.clone();
                        sol2.lambda = sol.lambda.clone();
                        let mut a_cap: f64 = 1.0;
                        for k in 0..n - 1 {
                            if lin.stage_ineq[k].value.len() > 0 {
                                let ds = &lin.stage_ineq[k].jx * &sol2.dx[k]
                                    + &lin.stage_ineq[k].ju * &sol2.du[k]
                                    + (&lin.stage_ineq[k].value - &it.s_stage[k]);
                                a_cap = a_cap.min(fraction_to_boundary(&it.s_stage[k], &ds, tau));
                                ds_stage[k] = ds;
                            }
                        }
                        for k in 1..n {
                            if lin.state_ineq[k].value.len() > 0 {
                                let dg = &lin.state_ineq[k].jx * &sol2.dx[k];
                                a_cap = a_cap.min(fraction_to_boundary(&lin.state_ineq[k].value, &dg, tau));
                            }
                        }
                        sol = sol2;
                        alpha_primal = a_cap;
                        alpha = a_cap;
                        if trace {
                            eprintln!("   soc applied, a_max {:.2e}", a_cap);
                        }
                        continue;
                    }
                }
            }
            alpha *= 0.5;
        }
        if timing {
            eprintln!("iter {}: lin {:.1}ms riccati {:.1}ms ls {:.1}ms", iter, lin_ms, ric_ms, t_ric.elapsed().as_secs_f64()*1e3 - ric_ms);
        }
        if !accepted {
            if lm < 1e4 {
                lm = (lm * 10.0).max(1e-2);
                if trace {
                    eprintln!("   raising proximal damping to {:.1e}", lm);
                }
                continue;
            }
            if !restoring && theta0 > settings.tolerance {
                // Enter feasibility restoration instead of giving up.
                restoring = true;
                restore_entry_theta = theta0;
                if trace {
                    eprintln!("   entering restoration at theta {:.3e}", theta0);
                }
                continue;
            }
            stats.status = ConvergenceStatus::LineSearchFailure;
            stats.iterations = iter;
            break;
        }
        if alpha < 0.25 && step_inf > 1.0 {
            lm = (lm * 4.0).max(1e-2).min(1e4);
        } else {
            lm = if lm > 1e-3 { lm * 0.2 } else { 0.0 };
        }
        if restoring {
            let theta_now = constraint_violation(p, &trial.xs, &trial.us, &trial.s_stage, &trial.s_state);
            if theta_now < 0.1 * restore_entry_theta || theta_now < settings.tolerance {
                restoring = false;
                if trace {
                    eprintln!("   leaving restoration at theta {:.3e}", theta_now);
                }
            }
        }
        stats.step_sizes.push(alpha);

        // Accept the step.
        // Keep inequality duals inside a wide box around the barrier value
        // mu/s; a dual racing ahead of a stalled primal poisons the fold.
        let kappa_sigma = 1e10;
        for k in 0..n - 1 {
            it.xs[k] = trial.xs[k].clone();
            it.us[k] = trial.us[k].clone();
            it.s_stage[k] = trial.s_stage[k].clone();
            for i in 0..it.z_stage[k].len() {
                let znew = (it.z_stage[k][i] + alpha_dual * dz_stage[k][i]).max(1e-12);
                let center = mu / it.s_stage[k][i].max(1e-12);
                it.z_stage[k][i] = znew.clamp(center / kappa_sigma, center * kappa_sigma);
            }
            it.lambda[k] = &it.lambda[k] * (1.0 - alpha) + alpha * &lambda_new[k];
            it.nu[k] = &it.nu[k] * (1.0 - alpha) + alpha * &nu_new[k];
        }
        it.xs[n - 1] = trial.xs[n - 1].clone();
        for k in 1..n {
            if it.eta[k].len() == eta_new[k].len() {
                it.eta[k] = &it.eta[k] * (1.0 - alpha) + alpha * &eta_new[k];
            } else {
                it.eta[k] = eta_new[k].clone();
            }
        }
        stats.iterations = iter + 1;
    }

    // Return the best iterate when not converged.
    if stats.status != ConvergenceStatus::Converged {
        if let Some((b, kkt)) = best {
            if kkt < stats.kkt_residual {
                stats.kkt_residual = kkt;
                it = b;
            }
        }
    }
    stats.solve_time = t_start.elapsed().as_secs_f64();
    Ok((it, stats))
}
