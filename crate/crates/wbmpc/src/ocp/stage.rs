//! [`StageOcp`] implementation for [`OcpProblem`]: costs, transitions, and
//! constraint rows of all six formulations.
//!
//! Constraint placement follows the solver's stage structure:
//!
//! - force rows (swing `F = 0`, arm `F = F_des`), dynamics path rows, and
//!   torque bounds live on the stage, where their input Jacobians have full
//!   row rank;
//! - velocity rows (stance feet, swing vertical reference, arm tracking)
//!   are state-only for the formulations with `v` in the state and are
//!   reported as node equalities (the solver folds them through the
//!   dynamics); for the centroidal-velocity formulations the velocity is an
//!   input and the same rows become stage equalities;
//! - node 0 carries no state constraints: its state is pinned to the
//!   measurement.

use super::{config_error, initial_state_vector, Formulation, OcpProblem, TORQUE_NODE_LIMIT};
use crate::dynamics::derivatives::{
    centroidal_rate_derivatives, config_error_derivatives, frame_velocity_derivatives,
    momentum_derivatives, net_wrench_derivatives, rnea_derivatives_at,
};
use crate::dynamics::{self, ContactForceSet};
use crate::model::Configuration;
use crate::solver::{ConstraintLin, CostQuad, StageOcp, StateConstraintLin, TransitionLin};
use nalgebra::{DMatrix, DVector};

const ARM_FRAME: usize = 4;

/// Half-width of the velocity-tracking bands (stance feet, swing vertical
/// reference, arm tracking). The rows are enforced as two-sided inequalities
/// `|e| <= VELOCITY_BAND`, keeping them strictly feasible for the interior
/// solver while pinning the physics well below the acceptance residual
/// budget of ten solver tolerances.
pub const VELOCITY_BAND: f64 = 2e-4;

impl OcpProblem {
    fn flags(&self, k: usize) -> &[bool; 4] {
        &self.contact_flags[k]
    }

    fn n_stance(&self, k: usize) -> usize {
        self.flags(k).iter().filter(|f| **f).count()
    }

    fn n_swing(&self, k: usize) -> usize {
        4 - self.n_stance(k)
    }

    fn pre_td_enabled() -> bool {
        std::env::var("WBMPC_NO_PRETD").is_err()
    }

    /// Velocity-row count at a node: 3 per stance foot, 1 per swing foot
    /// (3 when committed to touch down at the next node), 3 for the arm.
    fn velocity_row_count(&self, k: usize) -> usize {
        let pre_td = if Self::pre_td_enabled() {
            (0..4).filter(|f| self.pre_touchdown[k][*f]).count()
        } else {
            0
        };
        let arm = if Self::arm_rows_enabled() { 3 } else { 0 };
        3 * self.n_stance(k) + self.n_swing(k) + 2 * pre_td + arm
    }

    fn force_vector(&self, u: &DVector<f64>, k: usize) -> ContactForceSet {
        let layout = self.layout(k);
        ContactForceSet::from_vector(&u.rows(layout.force.start, layout.force.len()).into_owned())
    }

    /// Finite joint position bound rows `(joint, bound, is_upper)`.
    fn position_bound_rows(&self) -> Vec<(usize, f64, bool)> {
        let mut rows = Vec::new();
        for (j, joint) in self.tree.joints.iter().enumerate() {
            if joint.position_limits.0.is_finite() {
                rows.push((j, joint.position_limits.0, false));
            }
            if joint.position_limits.1.is_finite() {
                rows.push((j, joint.position_limits.1, true));
            }
        }
        rows
    }

    fn velocity_bound_rows(&self) -> Vec<(usize, f64)> {
        self.tree
            .joints
            .iter()
            .enumerate()
            .filter(|(_, j)| j.velocity_limit.is_finite())
            .map(|(i, j)| (i, j.velocity_limit))
            .collect()
    }

    fn torque_bound_rows(&self) -> Vec<(usize, f64)> {
        self.tree
            .joints
            .iter()
            .enumerate()
            .filter(|(_, j)| j.effort_limit.is_finite())
            .map(|(i, j)| (i, j.effort_limit))
            .collect()
    }

    fn cone_enabled() -> bool {
        std::env::var("WBMPC_NO_CONE").is_err()
    }

    /// Velocity-band rows carried by stage `k`: node `k+1` rows for the
    /// formulations whose velocity lives in the state (evaluated through the
    /// transition), node `k` rows when the velocity is an input.
    fn band_node(&self, k: usize) -> usize {
        if self.velocity_in_state() {
            k + 1
        } else {
            k
        }
    }

    fn arm_rows_enabled() -> bool {
        std::env::var("WBMPC_NO_ARMVEL").is_err()
    }

    fn state_bounds_enabled() -> bool {
        std::env::var("WBMPC_NO_BOUNDS").is_err()
    }

    fn uses_torque_estimate(&self) -> bool {
        matches!(
            self.formulation,
            Formulation::CentVelPath
                | Formulation::CentVelEmbedded
                | Formulation::CentAccPath
                | Formulation::CentAccEmbedded
        )
    }

    /// Composite velocity of the centroidal-velocity-embedded formulation
    /// plus its partials with respect to `(h, dq, v_j)`.
    fn embedded_velocity(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let nv = self.nv();
        let nj = self.n_joints();
        let dq = self.state_dq(x);
        let q = self.node_configuration(x);
        let layout = self.layout(k);
        let vel = layout.vel.expect("embedded velocity input");
        let v_j = u.rows(vel.start, nj).into_owned();
        let h = x.rows(0, 6).into_owned();

        let (a_mat, _) = dynamics::centroidal_momentum(&self.tree, &q, &DVector::zeros(nv));
        let a_b = a_mat.view((0, 0), (6, 6)).into_owned();
        let a_j = a_mat.view((0, 6), (6, nj)).into_owned();
        let a_b_lu = a_b.lu();
        let v_b = a_b_lu.solve(&(&h - &a_j * &v_j)).expect("centroidal base block invertible");
        let mut v = DVector::zeros(nv);
        v.rows_mut(0, 6).copy_from(&v_b);
        v.rows_mut(6, nj).copy_from(&v_j);

        // d v_b/dh = A_b^{-1}; d v_b/dv_j = -A_b^{-1} A_j;
        // d v_b/ddq = -A_b^{-1} d(A(q) v)/ddq at fixed v.
        let (_, mom_dq, _) = momentum_derivatives(&self.tree, &self.q_ref, &dq, &v);
        let dvb_dh = a_b_lu.solve(&DMatrix::identity(6, 6)).unwrap();
        let dvb_dvj = -a_b_lu.solve(&a_j).unwrap();
        let dvb_ddq = -a_b_lu.solve(&mom_dq).unwrap();
        let mut dv_dh = DMatrix::zeros(nv, 6);
        dv_dh.view_mut((0, 0), (6, 6)).copy_from(&dvb_dh);
        let mut dv_dvj = DMatrix::zeros(nv, nj);
        dv_dvj.view_mut((0, 0), (6, nj)).copy_from(&dvb_dvj);
        dv_dvj.view_mut((6, 0), (nj, nj)).copy_from(&DMatrix::identity(nj, nj));
        let mut dv_ddq = DMatrix::zeros(nv, nv);
        dv_ddq.view_mut((0, 0), (6, nv)).copy_from(&dvb_ddq);
        (v, dv_dh, dv_ddq, dv_dvj)
    }

    fn embedded_velocity_value(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> DVector<f64> {
        let nv = self.nv();
        let nj = self.n_joints();
        let q = self.node_configuration(x);
        let layout = self.layout(k);
        let vel = layout.vel.expect("embedded velocity input");
        let v_j = u.rows(vel.start, nj).into_owned();
        let h = x.rows(0, 6).into_owned();
        let (a_mat, _) = dynamics::centroidal_momentum(&self.tree, &q, &DVector::zeros(nv));
        let a_b = a_mat.view((0, 0), (6, 6)).into_owned();
        let a_j = a_mat.view((0, 6), (6, nj)).into_owned();
        let v_b = a_b.lu().solve(&(&h - &a_j * &v_j)).expect("centroidal base block invertible");
        let mut v = DVector::zeros(nv);
        v.rows_mut(0, 6).copy_from(&v_b);
        v.rows_mut(6, nj).copy_from(&v_j);
        v
    }

    /// Node velocity in physical coordinates for constraint evaluation.
    fn node_velocity(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DVector<f64> {
        let nv = self.nv();
        if self.velocity_in_state() {
            return x.rows(nv, nv).into_owned();
        }
        let u = u.expect("centroidal-velocity formulations need the input");
        let layout = self.layout(k);
        let vel = layout.vel.clone().expect("velocity input");
        if vel.len() == nv {
            u.rows(vel.start, nv).into_owned()
        } else {
            self.embedded_velocity_value(x, u, k)
        }
    }

    /// Velocity-row residuals at node `k` for velocity `v` at configuration `q`.
    fn velocity_rows_value(&self, k: usize, q: &Configuration, v: &DVector<f64>) -> DVector<f64> {
        let vels = dynamics::contact_frame_velocities(&self.tree, q, v);
        let mut out = DVector::zeros(self.velocity_row_count(k));
        let mut at = 0;
        for foot in 0..4 {
            if self.flags(k)[foot] {
                out.rows_mut(at, 3).copy_from(&vels[foot]);
                at += 3;
            } else {
                let vz_ref = self.swing_vz[k][foot].unwrap_or(0.0);
                out[at] = vels[foot].z - vz_ref;
                at += 1;
                if Self::pre_td_enabled() && self.pre_touchdown[k][foot] {
                    out[at] = vels[foot].x;
                    out[at + 1] = vels[foot].y;
                    at += 2;
                }
            }
        }
        if Self::arm_rows_enabled() {
            for i in 0..3 {
                out[at + i] = vels[ARM_FRAME][i] - self.command.ee_velocity[i];
            }
        }
        out
    }

    /// Velocity rows with Jacobians with respect to `(dq, v)`.
    fn velocity_rows_linearized(
        &self,
        k: usize,
        dq: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let nv = self.nv();
        let der = frame_velocity_derivatives(&self.tree, &self.q_ref, dq, v);
        let m = self.velocity_row_count(k);
        let mut value = DVector::zeros(m);
        let mut jq = DMatrix::zeros(m, nv);
        let mut jv = DMatrix::zeros(m, nv);
        let mut at = 0;
        for foot in 0..4 {
            if self.flags(k)[foot] {
                value.rows_mut(at, 3).copy_from(&der.value[foot]);
                jq.view_mut((at, 0), (3, nv)).copy_from(&der.dq[foot]);
                jv.view_mut((at, 0), (3, nv)).copy_from(&der.dv[foot]);
                at += 3;
            } else {
                let vz_ref = self.swing_vz[k][foot].unwrap_or(0.0);
                value[at] = der.value[foot].z - vz_ref;
                jq.view_mut((at, 0), (1, nv)).copy_from(&der.dq[foot].row(2));
                jv.view_mut((at, 0), (1, nv)).copy_from(&der.dv[foot].row(2));
                at += 1;
                if Self::pre_td_enabled() && self.pre_touchdown[k][foot] {
                    for r in 0..2 {
                        value[at + r] = der.value[foot][r];
                        jq.view_mut((at + r, 0), (1, nv)).copy_from(&der.dq[foot].row(r));
                        jv.view_mut((at + r, 0), (1, nv)).copy_from(&der.dv[foot].row(r));
                    }
                    at += 2;
                }
            }
        }
        if Self::arm_rows_enabled() {
            for i in 0..3 {
                value[at + i] = der.value[ARM_FRAME][i] - self.command.ee_velocity[i];
            }
            jq.view_mut((at, 0), (3, nv)).copy_from(&der.dq[ARM_FRAME]);
            jv.view_mut((at, 0), (3, nv)).copy_from(&der.dv[ARM_FRAME]);
        }
        (value, jq, jv)
    }

    /// Force equality rows: swing feet pinned to zero, arm pinned to the
    /// commanded force. Returns (values, rows-into-force-slice).
    fn force_rows_value(&self, k: usize, f: &ContactForceSet) -> (DVector<f64>, Vec<(usize, usize)>) {
        let m = 3 * self.n_swing(k) + 3;
        let mut value = DVector::zeros(m);
        let mut map = Vec::with_capacity(m);
        let mut at = 0;
        for foot in 0..4 {
            if !self.flags(k)[foot] {
                for i in 0..3 {
                    value[at] = f.0[foot][i];
                    map.push((at, 3 * foot + i));
                    at += 1;
                }
            }
        }
        for i in 0..3 {
            value[at] = f.0[ARM_FRAME][i] - self.command.ee_force[i];
            map.push((at, 3 * ARM_FRAME + i));
            at += 1;
        }
        (value, map)
    }

    fn rnea_row_count(&self, k: usize) -> usize {
        match self.formulation {
            Formulation::WbInvDyn => {
                if k <= TORQUE_NODE_LIMIT {
                    self.nv()
                } else {
                    6
                }
            }
            _ => 0,
        }
    }
}

impl StageOcp for OcpProblem {
    fn num_nodes(&self) -> usize {
        self.grid.num_nodes()
    }

    fn state_dim(&self) -> usize {
        self.state_dimension()
    }

    fn input_dim(&self, k: usize) -> usize {
        self.layout(k).dim
    }

    fn initial_state(&self) -> DVector<f64> {
        initial_state_vector(self)
    }

    fn cost_value(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64 {
        let nv = self.nv();
        let dt_scale = 1.0;
        let q = self.node_configuration(x);
        let err_q = config_error(self, k, &q);
        let wq = self.weights.config_diag(nv, 4.min(self.n_joints()));
        let mut cost = err_q.iter().zip(wq.iter()).map(|(e, w)| w * e * e).sum::<f64>();

        if self.velocity_in_state() {
            let wv = self.weights.velocity_diag(nv, 0.0);
            for i in 0..nv {
                let e = x[nv + i] - self.v_des[i];
                cost += wv[i] * e * e;
            }
        } else {
            let wh = self.weights.momentum_diag();
            for i in 0..6 {
                let e = x[i] - self.h_des[i];
                cost += wh[i] * e * e;
            }
        }

        if let Some(u) = u {
            let layout = self.layout(k);
            if let Some(r) = &layout.tau {
                for i in r.clone() {
                    cost += self.weights.torque * u[i] * u[i];
                }
            }
            if let Some(r) = &layout.acc {
                let joint_start = if r.len() == nv { 6 } else { 0 };
                for (local, i) in r.clone().enumerate() {
                    let w = if local < joint_start { self.weights.accel_base } else { self.weights.accel_joint };
                    cost += w * u[i] * u[i];
                }
            }
            if let Some(r) = &layout.vel {
                let wv = self.weights.velocity_diag(nv, 1e-4);
                if r.len() == nv {
                    for (local, i) in r.clone().enumerate() {
                        let e = u[i] - self.v_des[local];
                        cost += wv[local] * e * e;
                    }
                } else {
                    for (local, i) in r.clone().enumerate() {
                        let e = u[i] - self.v_des[6 + local];
                        cost += wv[6 + local] * e * e;
                    }
                }
            }
            for (local, i) in layout.force.clone().enumerate() {
                let e = u[i] - self.force_des[k][local];
                cost += self.weights.force * e * e;
            }
        }
        cost * dt_scale
    }

    fn cost_quadratic(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> CostQuad {
        let nv = self.nv();
        let nx = self.state_dimension();
        let dq_off = self.dq_offset();
        let dq = self.state_dq(x);
        let mut grad_x = DVector::zeros(nx);
        let mut hess_xx = DMatrix::zeros(nx, nx);

        // Tangent-space configuration error through the manifold update.
        let (err_q, jac) = config_error_derivatives(&self.q_des[k], &self.q_ref, &dq);
        let wq = self.weights.config_diag(nv, 4.min(self.n_joints()));
        let mut wj = jac.clone();
        for r in 0..nv {
            for c in 0..nv {
                wj[(r, c)] *= wq[r];
            }
        }
        let g_dq = 2.0 * jac.transpose() * DVector::from_fn(nv, |i, _| wq[i] * err_q[i]);
        let h_dq = 2.0 * jac.transpose() * &wj;
        grad_x.rows_mut(dq_off, nv).copy_from(&g_dq);
        hess_xx.view_mut((dq_off, dq_off), (nv, nv)).copy_from(&h_dq);

        let mut value = err_q.iter().zip(wq.iter()).map(|(e, w)| w * e * e).sum::<f64>();

        if self.velocity_in_state() {
            let wv = self.weights.velocity_diag(nv, 0.0);
            for i in 0..nv {
                let e = x[nv + i] - self.v_des[i];
                value += wv[i] * e * e;
                grad_x[nv + i] += 2.0 * wv[i] * e;
                hess_xx[(nv + i, nv + i)] += 2.0 * wv[i];
            }
        } else {
            let wh = self.weights.momentum_diag();
            for i in 0..6 {
                let e = x[i] - self.h_des[i];
                value += wh[i] * e * e;
                grad_x[i] += 2.0 * wh[i] * e;
                hess_xx[(i, i)] += 2.0 * wh[i];
            }
        }

        let (grad_u, hess_uu) = match u {
            Some(u) => {
                let layout = self.layout(k);
                let nu = layout.dim;
                let mut g = DVector::zeros(nu);
                let mut h = DMatrix::zeros(nu, nu);
                if let Some(r) = &layout.tau {
                    for i in r.clone() {
                        value += self.weights.torque * u[i] * u[i];
                        g[i] += 2.0 * self.weights.torque * u[i];
                        h[(i, i)] += 2.0 * self.weights.torque;
                    }
                }
                if let Some(r) = &layout.acc {
                    let joint_start = if r.len() == nv { 6 } else { 0 };
                    for (local, i) in r.clone().enumerate() {
                        let w = if local < joint_start { self.weights.accel_base } else { self.weights.accel_joint };
                        value += w * u[i] * u[i];
                        g[i] += 2.0 * w * u[i];
                        h[(i, i)] += 2.0 * w;
                    }
                }
                if let Some(r) = &layout.vel {
                    let wv = self.weights.velocity_diag(nv, 1e-4);
                    let off = if r.len() == nv { 0 } else { 6 };
                    for (local, i) in r.clone().enumerate() {
                        let e = u[i] - self.v_des[off + local];
                        value += wv[off + local] * e * e;
                        g[i] += 2.0 * wv[off + local] * e;
                        h[(i, i)] += 2.0 * wv[off + local];
                    }
                }
                for (local, i) in layout.force.clone().enumerate() {
                    let e = u[i] - self.force_des[k][local];
                    value += self.weights.force * e * e;
                    g[i] += 2.0 * self.weights.force * e;
                    h[(i, i)] += 2.0 * self.weights.force;
                }
                (g, h)
            }
            None => (DVector::zeros(0), DMatrix::zeros(0, 0)),
        };
        let nu = grad_u.len();
        CostQuad { value, grad_x, grad_u, hess_xx, hess_uu, hess_xu: DMatrix::zeros(nx, nu) }
    }

    fn transition_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let nv = self.nv();
        let nj = self.n_joints();
        let dt = self.grid.steps[k];
        let layout = self.layout(k);
        let mut next = DVector::zeros(self.state_dimension());
        match self.formulation {
            Formulation::WbInvDyn | Formulation::CentAccPath => {
                let acc = layout.acc.unwrap();
                for i in 0..nv {
                    next[i] = x[i] + dt * x[nv + i];
                    next[nv + i] = x[nv + i] + dt * u[acc.start + i];
                }
            }
            Formulation::WbFwdDyn => {
                let q = self.node_configuration(x);
                let v = x.rows(nv, nv).into_owned();
                let tau = u.rows(layout.tau.clone().unwrap().start, nj).into_owned();
                let f = self.force_vector(u, k);
                let a = dynamics::forward_dynamics(&self.tree, &q, &v, &tau, &f)
                    .expect("mass matrix SPD");
                for i in 0..nv {
                    next[i] = x[i] + dt * v[i];
                    next[nv + i] = x[nv + i] + dt * a[i];
                }
            }
            Formulation::CentVelPath => {
                let q = self.node_configuration(x);
                let f = self.force_vector(u, k);
                let (w, _, _) = net_wrench_derivatives(&self.tree, &self.q_ref, &self.state_dq(x), &f);
                // Value-only path recomputes the wrench cheaply below; the
                // derivative helper also returns it, reuse to stay in sync.
                let _ = q;
                let vel = layout.vel.unwrap();
                for i in 0..6 {
                    next[i] = x[i] + dt * w[i];
                }
                for i in 0..nv {
                    next[6 + i] = x[6 + i] + dt * u[vel.start + i];
                }
            }
            Formulation::CentVelEmbedded => {
                let v = self.embedded_velocity_value(x, u, k);
                let f = self.force_vector(u, k);
                let (w, _, _) = net_wrench_derivatives(&self.tree, &self.q_ref, &self.state_dq(x), &f);
                for i in 0..6 {
                    next[i] = x[i] + dt * w[i];
                }
                for i in 0..nv {
                    next[6 + i] = x[6 + i] + dt * v[i];
                }
            }
            Formulation::CentAccEmbedded => {
                let q = self.node_configuration(x);
                let v = x.rows(nv, nv).into_owned();
                let f = self.force_vector(u, k);
                let acc = layout.acc.unwrap();
                let a_j = u.rows(acc.start, nj).into_owned();
                let (a_mat, _) = dynamics::centroidal_momentum(&self.tree, &q, &DVector::zeros(nv));
                let rho = {
                    let (amat_v, _) = dynamics::centroidal_momentum(&self.tree, &q, &v);
                    let _ = amat_v;
                    dynamics::centroidal_momentum_bias(&self.tree, &q, &v)
                };
                let (w, _, _) = net_wrench_derivatives(&self.tree, &self.q_ref, &self.state_dq(x), &f);
                let a_b_blk = a_mat.view((0, 0), (6, 6)).into_owned();
                let a_j_blk = a_mat.view((0, 6), (6, nj)).into_owned();
                let rhs = DVector::from_fn(6, |i, _| w[i] - rho[i]) - &a_j_blk * &a_j;
                let a_b = a_b_blk.lu().solve(&rhs).expect("centroidal base block invertible");
                for i in 0..nv {
                    next[i] = x[i] + dt * v[i];
                }
                for i in 0..6 {
                    next[nv + i] = x[nv + i] + dt * a_b[i];
                }
                for i in 0..nj {
                    next[nv + 6 + i] = x[nv + 6 + i] + dt * a_j[i];
                }
            }
        }
        next
    }

    fn transition_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> TransitionLin {
        let nv = self.nv();
        let nj = self.n_joints();
        let nx = self.state_dimension();
        let dt = self.grid.steps[k];
        let layout = self.layout(k);
        let nu = layout.dim;
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);

        match self.formulation {
            Formulation::WbInvDyn | Formulation::CentAccPath => {
                let acc = layout.acc.clone().unwrap();
                for i in 0..nv {
                    a[(i, i)] = 1.0;
                    a[(i, nv + i)] = dt;
                    a[(nv + i, nv + i)] = 1.0;
                    b[(nv + i, acc.start + i)] = dt;
                }
                TransitionLin { value: self.transition_value(k, x, u), a, b }
            }
            Formulation::WbFwdDyn => {
                let dq = self.state_dq(x);
                let v = x.rows(nv, nv).into_owned();
                let tau_r = layout.tau.clone().unwrap();
                let tau = u.rows(tau_r.start, nj).into_owned();
                let f = self.force_vector(u, k);
                let q = self.node_configuration(x);
                let a_fd = dynamics::forward_dynamics(&self.tree, &q, &v, &tau, &f)
                    .expect("mass matrix SPD");
                // d a / d theta = -M^{-1} d rnea/d theta at a = a_fd.
                let der = rnea_derivatives_at(&self.tree, &self.q_ref, &dq, &v, &a_fd, &f);
                let m_chol = der.da.clone().cholesky().expect("mass matrix SPD");
                let da_dq = -m_chol.solve(&der.dq);
                let da_dv = -m_chol.solve(&der.dv);
                let da_df = -m_chol.solve(&der.df);
                let mut s_tau = DMatrix::zeros(nv, nj);
                for j in 0..nj {
                    s_tau[(6 + j, j)] = 1.0;
                }
                let da_dtau = m_chol.solve(&s_tau);

                for i in 0..nv {
                    a[(i, i)] = 1.0;
                    a[(i, nv + i)] = dt;
                    a[(nv + i, nv + i)] += 1.0;
                }
                a.view_mut((nv, 0), (nv, nv)).copy_from(&(dt * &da_dq));
                let mut vv = a.view((nv, nv), (nv, nv)).into_owned();
                vv += dt * &da_dv;
                a.view_mut((nv, nv), (nv, nv)).copy_from(&vv);
                b.view_mut((nv, tau_r.start), (nv, nj)).copy_from(&(dt * &da_dtau));
                b.view_mut((nv, layout.force.start), (nv, layout.force.len()))
                    .copy_from(&(dt * &da_df));

                let mut value = DVector::zeros(nx);
                for i in 0..nv {
                    value[i] = x[i] + dt * v[i];
                    value[nv + i] = x[nv + i] + dt * a_fd[i];
                }
                TransitionLin { value, a, b }
            }
            Formulation::CentVelPath => {
                let dq = self.state_dq(x);
                let f = self.force_vector(u, k);
                let (w, w_dq, w_df) = net_wrench_derivatives(&self.tree, &self.q_ref, &dq, &f);
                let vel = layout.vel.clone().unwrap();
                for i in 0..6 {
                    a[(i, i)] = 1.0;
                }
                a.view_mut((0, 6), (6, nv)).copy_from(&(dt * &w_dq));
                for i in 0..nv {
                    a[(6 + i, 6 + i)] = 1.0;
                    b[(6 + i, vel.start + i)] = dt;
                }
                b.view_mut((0, layout.force.start), (6, layout.force.len()))
                    .copy_from(&(dt * &w_df));
                let mut value = DVector::zeros(nx);
                for i in 0..6 {
                    value[i] = x[i] + dt * w[i];
                }
                for i in 0..nv {
                    value[6 + i] = x[6 + i] + dt * u[vel.start + i];
                }
                TransitionLin { value, a, b }
            }
            Formulation::CentVelEmbedded => {
                let dq = self.state_dq(x);
                let f = self.force_vector(u, k);
                let (w, w_dq, w_df) = net_wrench_derivatives(&self.tree, &self.q_ref, &dq, &f);
                let (v, dv_dh, dv_ddq, dv_dvj) = self.embedded_velocity(x, u, k);
                let vel = layout.vel.clone().unwrap();
                for i in 0..6 {
                    a[(i, i)] = 1.0;
                }
                a.view_mut((0, 6), (6, nv)).copy_from(&(dt * &w_dq));
                b.view_mut((0, layout.force.start), (6, layout.force.len()))
                    .copy_from(&(dt * &w_df));
                // dq rows.
                a.view_mut((6, 0), (nv, 6)).copy_from(&(dt * &dv_dh));
                let mut ddq = dt * &dv_ddq;
                for i in 0..nv {
                    ddq[(i, i)] += 1.0;
                }
                a.view_mut((6, 6), (nv, nv)).copy_from(&ddq);
                b.view_mut((6, vel.start), (nv, nj)).copy_from(&(dt * &dv_dvj));
                let mut value = DVector::zeros(nx);
                for i in 0..6 {
                    value[i] = x[i] + dt * w[i];
                }
                for i in 0..nv {
                    value[6 + i] = x[6 + i] + dt * v[i];
                }
                TransitionLin { value, a, b }
            }
            Formulation::CentAccEmbedded => {
                let dq = self.state_dq(x);
                let v = x.rows(nv, nv).into_owned();
                let f = self.force_vector(u, k);
                let acc = layout.acc.clone().unwrap();
                let a_j_in = u.rows(acc.start, nj).into_owned();

                let (rho, rho_dq, rho_dv) =
                    centroidal_rate_derivatives(&self.tree, &self.q_ref, &dq, &v, &DVector::zeros(nv));
                let (w, w_dq, w_df) = net_wrench_derivatives(&self.tree, &self.q_ref, &dq, &f);
                let q = self.node_configuration(x);
                let (a_mat, _) = dynamics::centroidal_momentum(&self.tree, &q, &DVector::zeros(nv));
                let a_b_blk = a_mat.view((0, 0), (6, 6)).into_owned();
                let a_j_blk = a_mat.view((0, 6), (6, nj)).into_owned();
                let lu = a_b_blk.lu();
                let rhs = DVector::from_fn(6, |i, _| w[i] - rho[i]) - &a_j_blk * &a_j_in;
                let a_b = lu.solve(&rhs).expect("centroidal base block invertible");
                let mut a_full = DVector::zeros(nv);
                a_full.rows_mut(0, 6).copy_from(&a_b);
                a_full.rows_mut(6, nj).copy_from(&a_j_in);
                // d(A(q) a)/ddq at fixed a.
                let (_, amom_dq, _) = momentum_derivatives(&self.tree, &self.q_ref, &dq, &a_full);
                let dab_ddq = lu.solve(&(&w_dq - &rho_dq - &amom_dq)).unwrap();
                let dab_dv = -lu.solve(&rho_dv).unwrap();
                let dab_daj = -lu.solve(&a_j_blk).unwrap();
                let dab_df = lu.solve(&w_df).unwrap();

                for i in 0..nv {
                    a[(i, i)] = 1.0;
                    a[(i, nv + i)] = dt;
                    a[(nv + i, nv + i)] = 1.0;
                }
                a.view_mut((nv, 0), (6, nv)).copy_from(&(dt * &dab_ddq));
                let mut vv = a.view((nv, nv), (6, nv)).into_owned();
                vv += dt * &dab_dv;
                a.view_mut((nv, nv), (6, nv)).copy_from(&vv);
                b.view_mut((nv, acc.start), (6, nj)).copy_from(&(dt * &dab_daj));
                b.view_mut((nv, layout.force.start), (6, layout.force.len()))
                    .copy_from(&(dt * &dab_df));
                for i in 0..nj {
                    b[(nv + 6 + i, acc.start + i)] = dt;
                }

                let mut value = DVector::zeros(nx);
                for i in 0..nv {
                    value[i] = x[i] + dt * v[i];
                    value[nv + i] = x[nv + i] + dt * a_full[i];
                }
                TransitionLin { value, a, b }
            }
        }
    }

    fn stage_eq_dim(&self, k: usize) -> usize {
        let mut m = self.rnea_row_count(k);
        m += 3 * self.n_swing(k) + 3; // force rows
        match self.formulation {
            Formulation::CentVelPath | Formulation::CentAccPath => m += 6,
            _ => {}
        }
        m
    }

    fn stage_eq_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let nv = self.nv();
        let layout = self.layout(k);
        let f = self.force_vector(u, k);
        let mut parts: Vec<DVector<f64>> = Vec::new();

        match self.formulation {
            Formulation::WbInvDyn => {
                let q = self.node_configuration(x);
                let v = x.rows(nv, nv).into_owned();
                let acc = layout.acc.clone().unwrap();
                let a = u.rows(acc.start, nv).into_owned();
                let gen = dynamics::rnea(&self.tree, &q, &v, &a, &f);
                let rows = self.rnea_row_count(k);
                let mut r = DVector::zeros(rows);
                for i in 0..6 {
                    r[i] = -gen[i];
                }
                if rows == nv {
                    let tau_r = layout.tau.clone().unwrap();
                    for j in 0..self.n_joints() {
                        r[6 + j] = u[tau_r.start + j] - gen[6 + j];
                    }
                }
                parts.push(r);
            }
            Formulation::CentVelPath => {
                let q = self.node_configuration(x);
                let vel = layout.vel.clone().unwrap();
                let v = u.rows(vel.start, nv).into_owned();
                let (_, h) = dynamics::centroidal_momentum(&self.tree, &q, &v);
                let mut r = DVector::zeros(6);
                for i in 0..6 {
                    r[i] = x[i] - h[i];
                }
                parts.push(r);
            }
            Formulation::CentAccPath => {
                let q = self.node_configuration(x);
                let v = x.rows(nv, nv).into_owned();
                let acc = layout.acc.clone().unwrap();
                let a = u.rows(acc.start, nv).into_owned();
                let (amat, _) = dynamics::centroidal_momentum(&self.tree, &q, &v);
                let rate = &amat * &a + dynamics::centroidal_momentum_bias(&self.tree, &q, &v);
                let dq = self.state_dq(x);
                let (w, _, _) = net_wrench_derivatives(&self.tree, &self.q_ref, &dq, &f);
                let mut r = DVector::zeros(6);
                for i in 0..6 {
                    r[i] = rate[i] - w[i];
                }
                parts.push(r);
            }
            _ => {}
        }

        let (force_rows, _) = self.force_rows_value(k, &f);
        parts.push(force_rows);

        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(total);
        let mut at = 0;
        for p in parts {
            out.rows_mut(at, p.len()).copy_from(&p);
            at += p.len();
        }
        out
    }

    fn stage_eq_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintLin {
        let nv = self.nv();
        let nj = self.n_joints();
        let nx = self.state_dimension();
        let layout = self.layout(k);
        let nu = layout.dim;
        let dq_off = self.dq_offset();
        let dq = self.state_dq(x);
        let f = self.force_vector(u, k);
        let m = self.stage_eq_dim(k);
        let mut value = DVector::zeros(m);
        let mut jx = DMatrix::zeros(m, nx);
        let mut ju = DMatrix::zeros(m, nu);
        let mut at = 0;

        match self.formulation {
            Formulation::WbInvDyn => {
                let v = x.rows(nv, nv).into_owned();
                let acc = layout.acc.clone().unwrap();
                let a = u.rows(acc.start, nv).into_owned();
                let der = rnea_derivatives_at(&self.tree, &self.q_ref, &dq, &v, &a, &f);
                let rows = self.rnea_row_count(k);
                for i in 0..6 {
                    value[at + i] = -der.value[i];
                }
                if rows == nv {
                    let tau_r = layout.tau.clone().unwrap();
                    for j in 0..nj {
                        value[at + 6 + j] = u[tau_r.start + j] - der.value[6 + j];
                        ju[(at + 6 + j, tau_r.start + j)] = 1.0;
                    }
                }
                for r in 0..rows {
                    for c in 0..nv {
                        jx[(at + r, dq_off + c)] = -der.dq[(r, c)];
                        jx[(at + r, nv + c)] = -der.dv[(r, c)];
                        ju[(at + r, acc.start + c)] = -der.da[(r, c)];
                    }
                    for c in 0..layout.force.len() {
                        ju[(at + r, layout.force.start + c)] = -der.df[(r, c)];
                    }
                }
                at += rows;
            }
            Formulation::CentVelPath => {
                let vel = layout.vel.clone().unwrap();
                let v = u.rows(vel.start, nv).into_owned();
                let (h_val, mom_dq, a_mat) = momentum_derivatives(&self.tree, &self.q_ref, &dq, &v);
                for i in 0..6 {
                    value[at + i] = x[i] - h_val[i];
                    jx[(at + i, i)] = 1.0;
                    for c in 0..nv {
                        jx[(at + i, 6 + c)] = -mom_dq[(i, c)];
                        ju[(at + i, vel.start + c)] = -a_mat[(i, c)];
                    }
                }
                at += 6;
            }
            Formulation::CentAccPath => {
                let v = x.rows(nv, nv).into_owned();
                let acc = layout.acc.clone().unwrap();
                let a = u.rows(acc.start, nv).into_owned();
                let (rate, rate_dq, rate_dv) =
                    centroidal_rate_derivatives(&self.tree, &self.q_ref, &dq, &v, &a);
                let (w, w_dq, w_df) = net_wrench_derivatives(&self.tree, &self.q_ref, &dq, &f);
                let (_, _, a_mat) = momentum_derivatives(&self.tree, &self.q_ref, &dq, &DVector::zeros(nv));
                for i in 0..6 {
                    value[at + i] = rate[i] - w[i];
                    for c in 0..nv {
                        jx[(at + i, dq_off + c)] = rate_dq[(i, c)] - w_dq[(i, c)];
                        jx[(at + i, nv + c)] = rate_dv[(i, c)];
                        ju[(at + i, acc.start + c)] = a_mat[(i, c)];
                    }
                    for c in 0..layout.force.len() {
                        ju[(at + i, layout.force.start + c)] = -w_df[(i, c)];
                    }
                }
                at += 6;
            }
            _ => {}
        }

        // Force rows: identity selectors into the force slice.
        let (force_rows, map) = self.force_rows_value(k, &f);
        for (row, col) in &map {
            value[at + row] = force_rows[*row];
            ju[(at + row, layout.force.start + col)] = 1.0;
        }
        at += force_rows.len();

        debug_assert_eq!(at, m);
        ConstraintLin { value, jx, ju }
    }

    fn state_eq_dim(&self, _k: usize) -> usize {
        0
    }

    fn state_eq_value(&self, _k: usize, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn state_eq_linearized(&self, _k: usize, _x: &DVector<f64>) -> StateConstraintLin {
        StateConstraintLin { value: DVector::zeros(0), jx: DMatrix::zeros(0, self.state_dimension()) }
    }

    fn stage_ineq_dim(&self, k: usize) -> usize {
        let mut m = if Self::cone_enabled() { 2 * self.n_stance(k) } else { 0 };
        m += 2 * self.velocity_row_count(self.band_node(k));
        if k <= TORQUE_NODE_LIMIT {
            if matches!(self.formulation, Formulation::WbInvDyn | Formulation::WbFwdDyn) {
                m += 2 * self.torque_bound_rows().len();
            }
            if self.uses_torque_estimate() {
                m += 2 * self.torque_bound_rows().len();
            }
        }
        if !self.velocity_in_state() {
            m += 2 * self.velocity_bound_rows().len();
        }
        m
    }

    fn stage_ineq_value(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let layout = self.layout(k);
        let f = self.force_vector(u, k);
        let mu = self.friction_coefficient;
        let mut out = DVector::zeros(self.stage_ineq_dim(k));
        let mut at = 0;
        if Self::cone_enabled() {
            for foot in 0..4 {
                if self.flags(k)[foot] {
                    let ff = &f.0[foot];
                    out[at] = ff.z;
                    out[at + 1] = mu * mu * ff.z * ff.z - ff.x * ff.x - ff.y * ff.y;
                    at += 2;
                }
            }
        }
        {
            // Velocity-tracking bands.
            let node = self.band_node(k);
            let e = if self.velocity_in_state() {
                let x_next = self.transition_value(k, x, u);
                let q_next = self.node_configuration(&x_next);
                let v_next = x_next.rows(self.nv(), self.nv()).into_owned();
                self.velocity_rows_value(node, &q_next, &v_next)
            } else {
                let q = self.node_configuration(x);
                let v = self.node_velocity(k, x, Some(u));
                self.velocity_rows_value(node, &q, &v)
            };
            for i in 0..e.len() {
                out[at] = VELOCITY_BAND - e[i];
                out[at + 1] = e[i] + VELOCITY_BAND;
                at += 2;
            }
        }
        if k <= TORQUE_NODE_LIMIT {
            if let Some(tau_r) = &layout.tau {
                for (j, limit) in self.torque_bound_rows() {
                    let t = u[tau_r.start + j];
                    out[at] = t + limit;
                    out[at + 1] = limit - t;
                    at += 2;
                }
            }
            if self.uses_torque_estimate() {
                // Gravity-compensation torque estimate through the contact
                // Jacobian: joint rows of rnea(q, 0, 0, F).
                let q = self.node_configuration(x);
                let zero = DVector::zeros(self.nv());
                let gen = dynamics::rnea(&self.tree, &q, &zero, &zero, &f);
                for (j, limit) in self.torque_bound_rows() {
                    let t = gen[6 + j];
                    out[at] = t + limit;
                    out[at + 1] = limit - t;
                    at += 2;
                }
            }
        }
        if !self.velocity_in_state() {
            let vel = layout.vel.clone().unwrap();
            let off = if vel.len() == self.nv() { 6 } else { 0 };
            for (j, limit) in self.velocity_bound_rows() {
                let v = u[vel.start + off + j];
                out[at] = v + limit;
                out[at + 1] = limit - v;
                at += 2;
            }
        }
        debug_assert_eq!(at, out.len());
        out
    }

    fn stage_ineq_linearized(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> ConstraintLin {
        let nx = self.state_dimension();
        let layout = self.layout(k);
        let nu = layout.dim;
        let m = self.stage_ineq_dim(k);
        let mut value = DVector::zeros(m);
        let mut jx = DMatrix::zeros(m, nx);
        let mut ju = DMatrix::zeros(m, nu);
        let f = self.force_vector(u, k);
        let mu = self.friction_coefficient;
        let mut at = 0;
        if Self::cone_enabled() {
            for foot in 0..4 {
                if self.flags(k)[foot] {
                    let ff = &f.0[foot];
                    let fx = layout.force.start + 3 * foot;
                    value[at] = ff.z;
                    ju[(at, fx + 2)] = 1.0;
                    value[at + 1] = mu * mu * ff.z * ff.z - ff.x * ff.x - ff.y * ff.y;
                    ju[(at + 1, fx)] = -2.0 * ff.x;
                    ju[(at + 1, fx + 1)] = -2.0 * ff.y;
                    ju[(at + 1, fx + 2)] = 2.0 * mu * mu * ff.z;
                    at += 2;
                }
            }
        }
        {
            // Velocity-tracking bands with exact chain rule.
            let node = self.band_node(k);
            let (e, ex, eu): (DVector<f64>, DMatrix<f64>, DMatrix<f64>) = if self.velocity_in_state() {
                let trans = self.transition_linearized(k, x, u);
                let q_next_dq = trans.value.rows(self.dq_offset(), self.nv()).into_owned();
                let v_next = trans.value.rows(self.nv(), self.nv()).into_owned();
                let (val, jq, jv) = self.velocity_rows_linearized(node, &q_next_dq, &v_next);
                let m_v = val.len();
                let mut jnext = DMatrix::zeros(m_v, nx);
                jnext.view_mut((0, 0), (m_v, self.nv())).copy_from(&jq);
                jnext.view_mut((0, self.nv()), (m_v, self.nv())).copy_from(&jv);
                (val, &jnext * &trans.a, &jnext * &trans.b)
            } else {
                let nv = self.nv();
                let nj = self.n_joints();
                let dq = self.state_dq(x);
                match self.formulation {
                    Formulation::CentVelPath => {
                        let vel = layout.vel.clone().unwrap();
                        let v = u.rows(vel.start, nv).into_owned();
                        let (val, jq, jv) = self.velocity_rows_linearized(node, &dq, &v);
                        let m_v = val.len();
                        let mut ex = DMatrix::zeros(m_v, nx);
                        ex.view_mut((0, 6), (m_v, nv)).copy_from(&jq);
                        let mut eu = DMatrix::zeros(m_v, layout.dim);
                        eu.view_mut((0, vel.start), (m_v, nv)).copy_from(&jv);
                        (val, ex, eu)
                    }
                    Formulation::CentVelEmbedded => {
                        let (v, dv_dh, dv_ddq, dv_dvj) = self.embedded_velocity(x, u, k);
                        let vel = layout.vel.clone().unwrap();
                        let (val, jq, jv) = self.velocity_rows_linearized(node, &dq, &v);
                        let m_v = val.len();
                        let mut ex = DMatrix::zeros(m_v, nx);
                        ex.view_mut((0, 0), (m_v, 6)).copy_from(&(&jv * &dv_dh));
                        ex.view_mut((0, 6), (m_v, nv)).copy_from(&(&jq + &jv * &dv_ddq));
                        let mut eu = DMatrix::zeros(m_v, layout.dim);
                        eu.view_mut((0, vel.start), (m_v, nj)).copy_from(&(&jv * &dv_dvj));
                        (val, ex, eu)
                    }
                    _ => unreachable!(),
                }
            };
            for i in 0..e.len() {
                value[at] = VELOCITY_BAND - e[i];
                value[at + 1] = e[i] + VELOCITY_BAND;
                for c in 0..nx {
                    jx[(at, c)] = -ex[(i, c)];
                    jx[(at + 1, c)] = ex[(i, c)];
                }
                for c in 0..layout.dim {
                    ju[(at, c)] = -eu[(i, c)];
                    ju[(at + 1, c)] = eu[(i, c)];
                }
                at += 2;
            }
        }
        if k <= TORQUE_NODE_LIMIT {
            if let Some(tau_r) = &layout.tau {
                for (j, limit) in self.torque_bound_rows() {
                    let t = u[tau_r.start + j];
                    value[at] = t + limit;
                    ju[(at, tau_r.start + j)] = 1.0;
                    value[at + 1] = limit - t;
                    ju[(at + 1, tau_r.start + j)] = -1.0;
                    at += 2;
                }
            }
            if self.uses_torque_estimate() {
                let dq = self.state_dq(x);
                let zero = DVector::zeros(self.nv());
                let der = rnea_derivatives_at(&self.tree, &self.q_ref, &dq, &zero, &zero, &f);
                let dq_off = self.dq_offset();
                for (j, limit) in self.torque_bound_rows() {
                    let t = der.value[6 + j];
                    value[at] = t + limit;
                    value[at + 1] = limit - t;
                    for c in 0..self.nv() {
                        jx[(at, dq_off + c)] = der.dq[(6 + j, c)];
                        jx[(at + 1, dq_off + c)] = -der.dq[(6 + j, c)];
                    }
                    for c in 0..layout.force.len() {
                        ju[(at, layout.force.start + c)] = der.df[(6 + j, c)];
                        ju[(at + 1, layout.force.start + c)] = -der.df[(6 + j, c)];
                    }
                    at += 2;
                }
            }
        }
        if !self.velocity_in_state() {
            let vel = layout.vel.clone().unwrap();
            let off = if vel.len() == self.nv() { 6 } else { 0 };
            for (j, limit) in self.velocity_bound_rows() {
                let col = vel.start + off + j;
                value[at] = u[col] + limit;
                ju[(at, col)] = 1.0;
                value[at + 1] = limit - u[col];
                ju[(at + 1, col)] = -1.0;
                at += 2;
            }
        }
        debug_assert_eq!(at, m);
        ConstraintLin { value, jx, ju }
    }

    fn state_ineq_dim(&self, k: usize) -> usize {
        if k == 0 || !Self::state_bounds_enabled() {
            return 0;
        }
        let mut m = self.position_bound_rows().len();
        if self.velocity_in_state() {
            m += 2 * self.velocity_bound_rows().len();
        }
        m
    }

    fn state_ineq_value(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let m = self.state_ineq_dim(k);
        if m == 0 {
            return DVector::zeros(0);
        }
        let nv = self.nv();
        let dq_off = self.dq_offset();
        let mut out = DVector::zeros(m);
        let mut at = 0;
        for (j, bound, upper) in self.position_bound_rows() {
            let qj = self.q_ref.joints[j] + x[dq_off + 6 + j];
            out[at] = if upper { bound - qj } else { qj - bound };
            at += 1;
        }
        if self.velocity_in_state() {
            for (j, limit) in self.velocity_bound_rows() {
                let v = x[nv + 6 + j];
                out[at] = v + limit;
                out[at + 1] = limit - v;
                at += 2;
            }
        }
        out
    }

    fn state_ineq_linearized(&self, k: usize, x: &DVector<f64>) -> StateConstraintLin {
        let nx = self.state_dimension();
        let m = self.state_ineq_dim(k);
        let value = self.state_ineq_value(k, x);
        let mut jx = DMatrix::zeros(m, nx);
        if m == 0 {
            return StateConstraintLin { value, jx };
        }
        let nv = self.nv();
        let dq_off = self.dq_offset();
        let mut at = 0;
        for (j, _, upper) in self.position_bound_rows() {
            jx[(at, dq_off + 6 + j)] = if upper { -1.0 } else { 1.0 };
            at += 1;
        }
        if self.velocity_in_state() {
            for (j, _) in self.velocity_bound_rows() {
                jx[(at, nv + 6 + j)] = 1.0;
                jx[(at + 1, nv + 6 + j)] = -1.0;
                at += 2;
            }
        }
        StateConstraintLin { value, jx }
    }
}
