//! First derivatives of the dynamics kernels via forward-mode duals.
//!
//! Configuration derivatives are taken with respect to the components of a
//! tangent increment `dq` around a reference configuration, consistent with
//! [`crate::model::integrate`]: the perturbed configuration is
//! `q_ref (+) (dq + eps)`. Sweeps run the generic kernels on [`Dual`] scalars
//! in chunks of `LANES` directions, sharing the primal computation.

use crate::dynamics::{all_contact_jacobians, centroidal_momentum_matrix, kernel, mass_matrix, ContactForceSet};
use crate::geom::{Quat, V3};
use crate::model::{integrate, integrate_parts, Configuration, KinematicTree};
use crate::scalar::Dual;
use kernel::BaseMotion;
use nalgebra::{DMatrix, DVector, Vector3, Vector6};

pub(crate) const LANES: usize = 8;
pub(crate) type D = Dual<LANES>;

/// Seed a value vector whose component `i` is differentiation direction
/// `dir_base + i`; lanes cover global directions `[chunk, chunk + LANES)`.
/// Direction base marking a block as constant (not differentiated).
pub(crate) const CONST: usize = usize::MAX;

pub(crate) fn seed_slice(values: &[f64], dir_base: usize, chunk: usize) -> Vec<D> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if dir_base == CONST {
                return D::constant(v);
            }
            let dir = dir_base + i;
            if dir >= chunk && dir < chunk + LANES {
                D::variable(v, dir - chunk)
            } else {
                D::constant(v)
            }
        })
        .collect()
}

pub(crate) fn seed_v3(values: &Vector3<f64>, dir_base: usize, chunk: usize) -> V3<D> {
    let s = seed_slice(values.as_slice(), dir_base, chunk);
    V3([s[0], s[1], s[2]])
}

fn offset(dir_base: usize, by: usize) -> usize {
    if dir_base == CONST { CONST } else { dir_base + by }
}

/// Configuration `q_ref (+) dq` with the `dq` components seeded as directions
/// `dir_base..dir_base + nv` (pass `usize::MAX` to keep it constant).
pub(crate) fn seeded_config(
    q_ref: &Configuration,
    dq: &DVector<f64>,
    dir_base: usize,
    chunk: usize,
) -> (V3<D>, Quat<D>, Vec<D>) {
    let nj = q_ref.joints.len();
    let _ = nj;
    let dpos = seed_v3(&Vector3::new(dq[0], dq[1], dq[2]), dir_base, chunk);
    let drot = seed_v3(&Vector3::new(dq[3], dq[4], dq[5]), offset(dir_base, 3), chunk);
    let djoints: Vec<D> = seed_slice(&dq.as_slice()[6..], offset(dir_base, 6), chunk);
    integrate_parts(q_ref, &dpos, &drot, &djoints)
}

pub(crate) fn seeded_base_motion(v: &DVector<f64>, dir_base: usize, chunk: usize) -> (BaseMotion<D>, Vec<D>) {
    let lin = seed_v3(&Vector3::new(v[0], v[1], v[2]), dir_base, chunk);
    let ang = seed_v3(&Vector3::new(v[3], v[4], v[5]), offset(dir_base, 3), chunk);
    let qd = seed_slice(&v.as_slice()[6..], offset(dir_base, 6), chunk);
    (BaseMotion { lin_world: lin, ang_body: ang }, qd)
}

pub(crate) fn constant_base_motion(v: &DVector<f64>) -> (BaseMotion<D>, Vec<D>) {
    seeded_base_motion(v, CONST, 0)
}

/// Jacobians of the inverse-dynamics residual.
#[derive(Clone, Debug)]
pub struct RneaDerivatives {
    pub value: DVector<f64>,
    /// With respect to the tangent increment around the reference configuration.
    pub dq: DMatrix<f64>,
    pub dv: DMatrix<f64>,
    /// `= M(q)`.
    pub da: DMatrix<f64>,
    /// `= -J_c^T`, stacked per frame (nv x 3 n_frames).
    pub df: DMatrix<f64>,
}

/// Derivatives of `rnea` at the tangent point `dq` around `q_ref`.
///
/// `dq`/`dv` blocks come from dual sweeps of the full recursion; `da` is the
/// mass matrix and `df` the stacked contact-Jacobian transposes, both exact
/// analytic identities.
pub fn rnea_derivatives_at(
    tree: &KinematicTree,
    q_ref: &Configuration,
    dq0: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    forces: &ContactForceSet,
) -> RneaDerivatives {
    let nv = tree.nv();
    let n_dirs = 2 * nv;
    let mut value = DVector::zeros(nv);
    let mut jq = DMatrix::zeros(nv, nv);
    let mut jv = DMatrix::zeros(nv, nv);

    let forces_d: Vec<V3<D>> = forces.0.iter().map(|f| V3([
        D::constant(f.x),
        D::constant(f.y),
        D::constant(f.z),
    ])).collect();
    let (base_acc, qdd) = constant_base_motion(a);

    let mut chunk = 0;
    while chunk < n_dirs {
        let (pos, quat, joints) = seeded_config(q_ref, dq0, 0, chunk);
        let (base_vel, qd) = seeded_base_motion(v, nv, chunk);
        let poses = kernel::forward_kinematics(tree, &pos, &quat, &joints);
        let out = kernel::rnea_generic(tree, &poses, &base_vel, &qd, &base_acc, &qdd, &forces_d);
        for (r, val) in out.iter().enumerate() {
            if chunk == 0 {
                value[r] = val.re;
            }
            for lane in 0..LANES {
                let dir = chunk + lane;
                if dir >= n_dirs {
                    break;
                }
                if dir < nv {
                    jq[(r, dir)] = val.eps[lane];
                } else {
                    jv[(r, dir - nv)] = val.eps[lane];
                }
            }
        }
        chunk += LANES;
    }

    let q_eval = integrate(q_ref, dq0).expect("dimension-checked");
    let da = mass_matrix(tree, &q_eval);
    let jacs = all_contact_jacobians(tree, &q_eval);
    let nf = 3 * tree.contact_frames.len();
    let mut df = DMatrix::zeros(nv, nf);
    for (i, jac) in jacs.iter().enumerate() {
        df.view_mut((0, 3 * i), (nv, 3)).copy_from(&(-jac.transpose()));
    }
    RneaDerivatives { value, dq: jq, dv: jv, da, df }
}

/// Derivatives of `rnea` at the configuration itself (`dq = 0`), the public
/// tangent-space derivative contract.
pub fn rnea_derivatives(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
    a: &DVector<f64>,
    forces: &ContactForceSet,
) -> RneaDerivatives {
    rnea_derivatives_at(tree, q, &DVector::zeros(tree.nv()), v, a, forces)
}

/// Values and Jacobians of all contact-frame world linear velocities.
#[derive(Clone, Debug)]
pub struct FrameVelocityDerivatives {
    pub value: Vec<Vector3<f64>>,
    /// Per frame, 3 x nv with respect to the tangent increment.
    pub dq: Vec<DMatrix<f64>>,
    /// Per frame, 3 x nv with respect to the generalized velocity (= J).
    pub dv: Vec<DMatrix<f64>>,
}

pub fn frame_velocity_derivatives(
    tree: &KinematicTree,
    q_ref: &Configuration,
    dq0: &DVector<f64>,
    v: &DVector<f64>,
) -> FrameVelocityDerivatives {
    let nv = tree.nv();
    let nf = tree.contact_frames.len();
    let n_dirs = 2 * nv;
    let mut value = vec![Vector3::zeros(); nf];
    let mut dq = vec![DMatrix::zeros(3, nv); nf];
    let mut dv = vec![DMatrix::zeros(3, nv); nf];

    let mut chunk = 0;
    while chunk < n_dirs {
        let (pos, quat, joints) = seeded_config(q_ref, dq0, 0, chunk);
        let (base_vel, qd) = seeded_base_motion(v, nv, chunk);
        let poses = kernel::forward_kinematics(tree, &pos, &quat, &joints);
        let vels = kernel::velocity_pass(tree, &poses, &base_vel, &qd);
        for f in 0..nf {
            let out = kernel::frame_velocity(tree, &poses, &vels, f);
            for r in 0..3 {
                if chunk == 0 {
                    value[f][r] = out.0[r].re;
                }
                for lane in 0..LANES {
                    let dir = chunk + lane;
                    if dir >= n_dirs {
                        break;
                    }
                    if dir < nv {
                        dq[f][(r, dir)] = out.0[r].eps[lane];
                    } else {
                        dv[f][(r, dir - nv)] = out.0[r].eps[lane];
                    }
                }
            }
        }
        chunk += LANES;
    }
    FrameVelocityDerivatives { value, dq, dv }
}

/// Value and configuration-Jacobian of the centroidal momentum `h(q, w)` for
/// a fixed velocity argument `w` (the `A(q) w` map). The velocity Jacobian is
/// the centroidal momentum matrix itself.
pub fn momentum_derivatives(
    tree: &KinematicTree,
    q_ref: &Configuration,
    dq0: &DVector<f64>,
    w: &DVector<f64>,
) -> (Vector6<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nv = tree.nv();
    let mut value = Vector6::zeros();
    let mut dq = DMatrix::zeros(6, nv);
    let (base_vel, qd) = constant_base_motion(w);

    let mut chunk = 0;
    while chunk < nv {
        let (pos, quat, joints) = seeded_config(q_ref, dq0, 0, chunk);
        let poses = kernel::forward_kinematics(tree, &pos, &quat, &joints);
        let vels = kernel::velocity_pass(tree, &poses, &base_vel, &qd);
        let (lin, ang) = kernel::centroidal_momentum_value(tree, &poses, &vels);
        for r in 0..6 {
            let val = if r < 3 { lin.0[r] } else { ang.0[r - 3] };
            if chunk == 0 {
                value[r] = val.re;
            }
            for lane in 0..LANES {
                let dir = chunk + lane;
                if dir >= nv {
                    break;
                }
                dq[(r, dir)] = val.eps[lane];
            }
        }
        chunk += LANES;
    }
    let q_eval = integrate(q_ref, dq0).expect("dimension-checked");
    let poses = crate::dynamics::fk_f64(tree, &q_eval);
    let a = centroidal_momentum_matrix(tree, &poses);
    (value, dq, a)
}

/// Value and (dq, dv) Jacobians of the centroidal momentum rate
/// `A(q) a + Adot(q, v) v` for fixed `a`.
pub fn centroidal_rate_derivatives(
    tree: &KinematicTree,
    q_ref: &Configuration,
    dq0: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
) -> (Vector6<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nv = tree.nv();
    let n_dirs = 2 * nv;
    let mut value = Vector6::zeros();
    let mut dq = DMatrix::zeros(6, nv);
    let mut dv = DMatrix::zeros(6, nv);
    let (base_acc, qdd) = constant_base_motion(a);

    let mut chunk = 0;
    while chunk < n_dirs {
        let (pos, quat, joints) = seeded_config(q_ref, dq0, 0, chunk);
        let (base_vel, qd) = seeded_base_motion(v, nv, chunk);
        let poses = kernel::forward_kinematics(tree, &pos, &quat, &joints);
        let vels = kernel::velocity_pass(tree, &poses, &base_vel, &qd);
        let accs = kernel::acceleration_full(tree, &poses, &vels, &base_acc, &qd, &qdd, false);
        let (lin, ang) = kernel::centroidal_rate_value(tree, &poses, &vels, &accs);
        for r in 0..6 {
            let val = if r < 3 { lin.0[r] } else { ang.0[r - 3] };
            if chunk == 0 {
                value[r] = val.re;
            }
            for lane in 0..LANES {
                let dir = chunk + lane;
                if dir >= n_dirs {
                    break;
                }
                if dir < nv {
                    dq[(r, dir)] = val.eps[lane];
                } else {
                    dv[(r, dir - nv)] = val.eps[lane];
                }
            }
        }
        chunk += LANES;
    }
    (value, dq, dv)
}

/// Value, configuration-Jacobian, and force-Jacobian of the net external
/// wrench about the CoM (gravity plus contact forces).
pub fn net_wrench_derivatives(
    tree: &KinematicTree,
    q_ref: &Configuration,
    dq0: &DVector<f64>,
    forces: &ContactForceSet,
) -> (Vector6<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nv = tree.nv();
    let nf = tree.contact_frames.len();
    let mut value = Vector6::zeros();
    let mut dq = DMatrix::zeros(6, nv);
    let forces_d: Vec<V3<D>> = forces
        .0
        .iter()
        .map(|f| V3([D::constant(f.x), D::constant(f.y), D::constant(f.z)]))
        .collect();

    let mut chunk = 0;
    while chunk < nv {
        let (pos, quat, joints) = seeded_config(q_ref, dq0, 0, chunk);
        let poses = kernel::forward_kinematics(tree, &pos, &quat, &joints);
        let (lin, ang) = kernel::net_wrench_about_com(tree, &poses, &forces_d);
        for r in 0..6 {
            let val = if r < 3 { lin.0[r] } else { ang.0[r - 3] };
            if chunk == 0 {
                value[r] = val.re;
            }
            for lane in 0..LANES {
                let dir = chunk + lane;
                if dir >= nv {
                    break;
                }
                dq[(r, dir)] = val.eps[lane];
            }
        }
        chunk += LANES;
    }

    // d w / d F_i = [I; skew(x_i - com)].
    let q_eval = integrate(q_ref, dq0).expect("dimension-checked");
    let (_, com) = crate::dynamics::com_position(tree, &q_eval);
    let frames = crate::dynamics::contact_frame_positions(tree, &q_eval);
    let mut df = DMatrix::zeros(6, 3 * nf);
    for i in 0..nf {
        df.view_mut((0, 3 * i), (3, 3)).copy_from(&nalgebra::Matrix3::identity());
        let r = frames[i] - com;
        let sk = nalgebra::Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0);
        df.view_mut((3, 3 * i), (3, 3)).copy_from(&sk);
    }
    (value, dq, df)
}

/// Jacobian of `difference(q_des, q_ref (+) dq)` with respect to the `dq`
/// components (used by the tangent-space configuration cost).
pub fn config_error_derivatives(
    q_des: &Configuration,
    q_ref: &Configuration,
    dq0: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let nv = q_ref.nv();
    let mut value = DVector::zeros(nv);
    let mut jac = DMatrix::zeros(nv, nv);
    let mut chunk = 0;
    while chunk < nv {
        let (pos, quat, joints) = seeded_config(q_ref, dq0, 0, chunk);
        let err = crate::model::difference_parts(q_des, &pos, &quat, &joints);
        for (r, val) in err.iter().enumerate() {
            if chunk == 0 {
                value[r] = val.re;
            }
            for lane in 0..LANES {
                let dir = chunk + lane;
                if dir >= nv {
                    break;
                }
                jac[(r, dir)] = val.eps[lane];
            }
        }
        chunk += LANES;
    }
    (value, jac)
}
