//! Riccati recursion over the stage-wise KKT system.
//!
//! Solves the equality-constrained LQ problem
//!
//! ```text
//! min  sum_k 1/2 [dx;du]' [Q S; S' R] [dx;du] + [q;r]' [dx;du]  + terminal
//! s.t. dx_{k+1} = A_k dx_k + B_k du_k + d_k,      dx_0 given,
//!      C_k dx_k + D_k du_k + c_k = 0,
//! ```
//!
//! by a backward sweep that eliminates `du_k` and the stage multiplier
//! together, and a forward rollout. The direction is identical to factoring
//! the full sparse KKT system; stage equalities require `D_k` to have full
//! row rank (guaranteed by construction of the OCP formulations).
//!
//! Inequality (barrier) contributions must already be folded into the
//! quadratic blocks by the caller.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("stage {0}: input Hessian not positive definite even after regularization")]
    IndefiniteStage(usize),
    #[error("stage {0}: equality rows are rank deficient")]
    RankDeficientEqualities(usize),
}

/// Quadratic data of one stage.
#[derive(Clone, Debug)]
pub struct StageBlocks {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub r_vec: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Stage equality rows `C dx + D du + c = 0` (may be empty).
    pub c_x: DMatrix<f64>,
    pub c_u: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Terminal quadratic cost.
#[derive(Clone, Debug)]
pub struct TerminalBlocks {
    pub q: DMatrix<f64>,
    pub q_vec: DVector<f64>,
}

/// Primal-dual direction produced by the recursion.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub dx: Vec<DVector<f64>>,
    pub du: Vec<DVector<f64>>,
    /// Stage equality multipliers.
    pub nu: Vec<DVector<f64>>,
    /// Cost-to-go gradients at the new iterate, one per node 1..N-1; these
    /// are the dynamics multipliers of the KKT system.
    pub lambda: Vec<DVector<f64>>,
    /// Regularization that was added to the input Hessians to factor.
    pub regularization: f64,
}

struct StageGain {
    k_mat: DMatrix<f64>,
    k_ff: DVector<f64>,
    n_mat: DMatrix<f64>,
    nu0: DVector<f64>,
}

/// Solve the stage-wise KKT system. `reg_floor` seeds the inertia
/// correction; the input Hessians get `lambda I` added with `lambda`
/// doubling until every stage factorization succeeds.
pub fn riccati_solve(
    stages: &[StageBlocks],
    terminal: &TerminalBlocks,
    dx0: &DVector<f64>,
    reg_floor: f64,
) -> Result<RiccatiSolution, RiccatiError> {
    let mut reg = 0.0;
    loop {
        match backward_forward(stages, terminal, dx0, reg) {
            Ok(sol) => return Ok(sol),
            Err(RiccatiError::IndefiniteStage(_)) if reg < 1e9 => {
                reg = if reg == 0.0 { reg_floor.max(1e-8) } else { reg * 100.0 };
            }
            Err(e) => return Err(e),
        }
    }
}

fn backward_forward(
    stages: &[StageBlocks],
    terminal: &TerminalBlocks,
    dx0: &DVector<f64>,
    reg: f64,
) -> Result<RiccatiSolution, RiccatiError> {
    let n_stages = stages.len();
    let mut gains: Vec<Option<StageGain>> = (0..n_stages).map(|_| None).collect();
    let mut ps: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n_stages + 1];
    let mut pvecs: Vec<DVector<f64>> = vec![DVector::zeros(0); n_stages + 1];
    ps[n_stages] = terminal.q.clone();
    pvecs[n_stages] = terminal.q_vec.clone();

    for k in (0..n_stages).rev() {
        let st = &stages[k];
        let nu_dim = st.b.ncols();
        let p = &ps[k + 1];
        let p_vec = &pvecs[k + 1];
        let pa = p * &st.a;
        let pb = p * &st.b;
        let pd_p = p * &st.d + p_vec;
        let h_xx = &st.q + st.a.transpose() * &pa;
        let h_xu = &st.s + st.a.transpose() * &pb;
        let mut h_uu = &st.r + st.b.transpose() * &pb;
        for i in 0..nu_dim {
            h_uu[(i, i)] += reg;
        }
        let g_x = &st.q_vec + st.a.transpose() * &pd_p;
        let g_u = &st.r_vec + st.b.transpose() * &pd_p;

        let chol: Cholesky<f64, Dyn> = match h_uu.clone().cholesky() {
            Some(c) => c,
            None => return Err(RiccatiError::IndefiniteStage(k)),
        };

        let m_eq = st.c.len();
        let (k_mat, k_ff, n_mat, nu0, p_new, p_vec_new);
        if m_eq == 0 {
            let hinv_hxut = chol.solve(&h_xu.transpose());
            let hinv_gu = chol.solve(&g_u);
            k_mat = -&hinv_hxut;
            k_ff = -&hinv_gu;
            n_mat = DMatrix::zeros(0, st.a.ncols());
            nu0 = DVector::zeros(0);
            p_new = &h_xx - &h_xu * &hinv_hxut;
            p_vec_new = &g_x - &h_xu * &hinv_gu;
        } else {
            // Eliminate (du, nu) jointly:
            //   du = -Huu^{-1} (g_u + Hxu' dx + D' nu)
            //   E nu = c + C dx - D Huu^{-1} (g_u + Hxu' dx),  E = D Huu^{-1} D'
            let d_t = st.c_u.transpose();
            let hinv_dt = chol.solve(&d_t);
            let e = &st.c_u * &hinv_dt;
            let e_chol = match e.clone().cholesky() {
                Some(c) => c,
                None => {
                    // E is SPD whenever D has full row rank and Huu is SPD.
                    return Err(RiccatiError::RankDeficientEqualities(k));
                }
            };
            let hinv_hxut = chol.solve(&h_xu.transpose());
            let hinv_gu = chol.solve(&g_u);
            // M = C - D Huu^{-1} Hxu'
            let m_mat = &st.c_x - &st.c_u * &hinv_hxut;
            let n = e_chol.solve(&m_mat);
            let v0 = e_chol.solve(&(&st.c - &st.c_u * &hinv_gu));
            // du = kff + K dx
            let k_m = -(&hinv_hxut + chol.solve(&(&d_t * &n)));
            let k_f = -(&hinv_gu + chol.solve(&(&d_t * &v0)));
            // P = Hxx - Hxu Huu^{-1} Hxu' + M' E^{-1} M
            p_new = &h_xx - &h_xu * &hinv_hxut + m_mat.transpose() * &n;
            p_vec_new = &g_x + &h_xu * &k_f + st.c_x.transpose() * &v0;
            k_mat = k_m;
            k_ff = k_f;
            n_mat = n;
            nu0 = v0;
        }
        gains[k] = Some(StageGain { k_mat, k_ff, n_mat, nu0 });
        // Keep the cost-to-go symmetric against roundoff drift.
        ps[k] = 0.5 * (&p_new + p_new.transpose());
        pvecs[k] = p_vec_new;
    }

    // Forward rollout plus multipliers from the stored cost-to-go.
    let mut dx = Vec::with_capacity(n_stages + 1);
    let mut du = Vec::with_capacity(n_stages);
    let mut nu = Vec::with_capacity(n_stages);
    let mut lambda = Vec::with_capacity(n_stages);
    dx.push(dx0.clone());
    for k in 0..n_stages {
        let g = gains[k].as_ref().expect("gain computed");
        let dxk = dx[k].clone();
        let duk = &g.k_ff + &g.k_mat * &dxk;
        let nuk = &g.nu0 + &g.n_mat * &dxk;
        let dx_next = &stages[k].a * &dxk + &stages[k].b * &duk + &stages[k].d;
        du.push(duk);
        nu.push(nuk);
        dx.push(dx_next);
    }
    for k in 1..=n_stages {
        lambda.push(&ps[k] * &dx[k] + &pvecs[k]);
    }
    Ok(RiccatiSolution { dx, du, nu, lambda, regularization: reg })
}
