//! Rigid-body dynamics: inverse dynamics, mass matrix, bias forces, forward
//! dynamics, contact Jacobians, centroidal momentum, and first derivatives.
//!
//! Everything here is a pure function of the immutable model and the inputs.
//! Derivatives come from running the generic kernels on dual numbers (exact
//! forward-mode differentiation); the test suite checks every block against
//! central finite differences.

pub mod derivatives;
pub mod kernel;

use crate::geom::{Quat, V3};
use crate::model::{Configuration, KinematicTree, ModelError};
use kernel::{BaseMotion, Motion, Pose};
use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("singular mass matrix (broken model?)")]
    SingularMassMatrix,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// World-frame linear contact forces, one per contact frame, applied at the
/// frame origins. Ordering follows the tree's contact frame list
/// ([FL, FR, RL, RR, arm EE] for the benchmark model).
#[derive(Clone, Debug, PartialEq)]
pub struct ContactForceSet(pub Vec<Vector3<f64>>);

impl ContactForceSet {
    pub fn zeros(tree: &KinematicTree) -> Self {
        Self(vec![Vector3::zeros(); tree.contact_frames.len()])
    }

    pub fn dim(&self) -> usize {
        3 * self.0.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (i, f) in self.0.iter().enumerate() {
            out.fixed_rows_mut::<3>(3 * i).copy_from(f);
        }
        out
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() / 3;
        Self((0..n).map(|i| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])).collect())
    }
}

pub(crate) fn fk_f64(tree: &KinematicTree, q: &Configuration) -> Vec<Pose<f64>> {
    kernel::forward_kinematics(
        tree,
        &V3::from_f64(&q.base_pos),
        &Quat::from_wxyz(q.base_quat.w, q.base_quat.i, q.base_quat.j, q.base_quat.k),
        q.joints.as_slice(),
    )
}

pub(crate) fn base_motion_f64(v: &DVector<f64>) -> BaseMotion<f64> {
    BaseMotion {
        lin_world: V3([v[0], v[1], v[2]]),
        ang_body: V3([v[3], v[4], v[5]]),
    }
}

fn forces_f64(forces: &ContactForceSet) -> Vec<V3<f64>> {
    forces.0.iter().map(V3::from_f64).collect()
}

/// Inverse dynamics: the generalized force `M(q) a + b(q, v) - J_c(q)^T F_c`
/// required to realize acceleration `a` under contact forces `forces`.
/// The first six rows are the base wrench (world-frame force, body-frame
/// torque); they vanish for any physically consistent motion.
pub fn rnea(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
    a: &DVector<f64>,
    forces: &ContactForceSet,
) -> DVector<f64> {
    assert_eq!(v.len(), tree.nv(), "velocity dimension");
    assert_eq!(a.len(), tree.nv(), "acceleration dimension");
    assert_eq!(forces.0.len(), tree.contact_frames.len(), "contact force count");
    let poses = fk_f64(tree, q);
    let out = kernel::rnea_generic(
        tree,
        &poses,
        &base_motion_f64(v),
        &v.as_slice()[6..],
        &base_motion_f64(a),
        &a.as_slice()[6..],
        &forces_f64(forces),
    );
    DVector::from_vec(out)
}

/// Coriolis, centrifugal, and gravity forces: `b(q, v) = rnea(q, v, 0, 0)`.
pub fn bias_forces(tree: &KinematicTree, q: &Configuration, v: &DVector<f64>) -> DVector<f64> {
    rnea(tree, q, v, &DVector::zeros(tree.nv()), &ContactForceSet::zeros(tree))
}

/// Generalized gravity load: `g(q) = rnea(q, 0, 0, 0)`.
pub fn gravity_forces(tree: &KinematicTree, q: &Configuration) -> DVector<f64> {
    bias_forces(tree, q, &DVector::zeros(tree.nv()))
}

/// Joint-space mass matrix via the composite rigid-body algorithm.
pub fn mass_matrix(tree: &KinematicTree, q: &Configuration) -> DMatrix<f64> {
    let nv = tree.nv();
    let poses = fk_f64(tree, q);
    let comp = kernel::composite_inertias::<f64>(tree, &poses);
    let mut m = DMatrix::zeros(nv, nv);

    // Base 6x6 block from the total composite inertia.
    let r0 = poses[0].rot.value();
    let c = comp[0].com.value();
    let i_o = comp[0].i_o.value();
    let mass = comp[0].mass;
    let sk = |v: &Vector3<f64>| {
        nalgebra::Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
    };
    m.view_mut((0, 0), (3, 3)).copy_from(&(mass * nalgebra::Matrix3::identity()));
    m.view_mut((0, 3), (3, 3)).copy_from(&(-mass * r0 * sk(&c)));
    m.view_mut((3, 0), (3, 3)).copy_from(&(mass * sk(&c) * r0.transpose()));
    m.view_mut((3, 3), (3, 3)).copy_from(&i_o);

    for ji in 0..tree.joints.len() {
        let child = ji + 1;
        let axis = V3::<f64>::from_f64(&tree.joints[ji].axis);
        let (mut f_lin, mut f_ang) = comp[child].apply(&Motion { lin: V3::zero(), ang: axis });
        m[(6 + ji, 6 + ji)] = axis.dot(&f_ang);
        let mut cur = child;
        while cur != 0 {
            let joint = &tree.joints[cur - 1];
            let p = joint.parent_link;
            let r_rel = poses[p].rot.transpose().mul_mat(&poses[cur].rot);
            let d = V3::<f64>::from_f64(&joint.origin_translation);
            let f_lin_p = r_rel.mul_vec(&f_lin);
            f_ang = r_rel.mul_vec(&f_ang).add(&d.cross(&f_lin_p));
            f_lin = f_lin_p;
            cur = p;
            if cur != 0 {
                let j2 = cur - 1;
                let val = V3::<f64>::from_f64(&tree.joints[j2].axis).dot(&f_ang);
                m[(6 + ji, 6 + j2)] = val;
                m[(6 + j2, 6 + ji)] = val;
            }
        }
        let f_world = poses[0].rot.mul_vec(&f_lin).value();
        for r in 0..3 {
            m[(r, 6 + ji)] = f_world[r];
            m[(6 + ji, r)] = f_world[r];
            m[(3 + r, 6 + ji)] = f_ang.0[r];
            m[(6 + ji, 3 + r)] = f_ang.0[r];
        }
    }
    m
}

/// Forward dynamics: solve `M a = [0; tau_j] + J_c^T F - b` for `a`.
pub fn forward_dynamics(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
    tau_j: &DVector<f64>,
    forces: &ContactForceSet,
) -> Result<DVector<f64>, DynamicsError> {
    let nv = tree.nv();
    assert_eq!(tau_j.len(), tree.n_joints(), "torque dimension");
    // rhs = [0; tau] + J^T F - b = [0; tau] - rnea(q, v, 0, F)
    let rhs_neg = rnea(tree, q, v, &DVector::zeros(nv), forces);
    let mut rhs = -rhs_neg;
    for i in 0..tree.n_joints() {
        rhs[6 + i] += tau_j[i];
    }
    let m = mass_matrix(tree, q);
    m.cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or(DynamicsError::SingularMassMatrix)
}

/// 3 x nv Jacobian mapping generalized velocity to the world linear velocity
/// of a contact frame origin.
pub fn contact_jacobian(
    tree: &KinematicTree,
    q: &Configuration,
    frame_name: &str,
) -> Result<DMatrix<f64>, ModelError> {
    let idx = tree.frame_index(frame_name)?;
    let poses = fk_f64(tree, q);
    Ok(contact_jacobian_by_index(tree, &poses, idx))
}

/// Jacobians of all contact frames, in frame order.
pub fn all_contact_jacobians(tree: &KinematicTree, q: &Configuration) -> Vec<DMatrix<f64>> {
    let poses = fk_f64(tree, q);
    (0..tree.contact_frames.len())
        .map(|i| contact_jacobian_by_index(tree, &poses, i))
        .collect()
}

pub(crate) fn contact_jacobian_by_index(
    tree: &KinematicTree,
    poses: &[Pose<f64>],
    frame: usize,
) -> DMatrix<f64> {
    let nv = tree.nv();
    let f = &tree.contact_frames[frame];
    let x = kernel::frame_position::<f64>(tree, poses, frame).value();
    let r0 = poses[0].rot.value();
    let p0 = poses[0].pos.value();
    let mut j = DMatrix::zeros(3, nv);
    j.view_mut((0, 0), (3, 3)).copy_from(&nalgebra::Matrix3::identity());
    let rel_b = r0.transpose() * (x - p0);
    let sk = nalgebra::Matrix3::new(0.0, -rel_b.z, rel_b.y, rel_b.z, 0.0, -rel_b.x, -rel_b.y, rel_b.x, 0.0);
    j.view_mut((0, 3), (3, 3)).copy_from(&(-r0 * sk));
    // Walk the support chain from the carrying link to the base.
    let mut cur = f.link;
    while cur != 0 {
        let ji = cur - 1;
        let joint = &tree.joints[ji];
        let a_w = poses[cur].rot.value() * joint.axis;
        let x_j = poses[cur].pos.value();
        let col = a_w.cross(&(x - x_j));
        j.view_mut((0, 6 + ji), (3, 1)).copy_from(&col);
        cur = joint.parent_link;
    }
    j
}

/// Centroidal momentum matrix `A` (6 x nv) and the momentum `h_com = A v`:
/// linear momentum and angular momentum about the CoM, world axes.
pub fn centroidal_momentum(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
) -> (DMatrix<f64>, Vector6<f64>) {
    let poses = fk_f64(tree, q);
    let a = centroidal_momentum_matrix(tree, &poses);
    let vels = kernel::velocity_pass(tree, &poses, &base_motion_f64(v), &v.as_slice()[6..]);
    let (lin, ang) = kernel::centroidal_momentum_value::<f64>(tree, &poses, &vels);
    let mut h = Vector6::zeros();
    h.fixed_rows_mut::<3>(0).copy_from(&lin.value());
    h.fixed_rows_mut::<3>(3).copy_from(&ang.value());
    (a, h)
}

pub(crate) fn centroidal_momentum_matrix(tree: &KinematicTree, poses: &[Pose<f64>]) -> DMatrix<f64> {
    let nv = tree.nv();
    let comp = kernel::composite_inertias::<f64>(tree, poses);
    let (_, com) = kernel::com_position::<f64>(tree, poses);
    let com = com.value();
    let mut a = DMatrix::zeros(6, nv);

    let to_com = |link: usize, f: &V3<f64>, n: &V3<f64>| -> (Vector3<f64>, Vector3<f64>) {
        let rot = poses[link].rot.value();
        let pos = poses[link].pos.value();
        let f_w = rot * f.value();
        let n_w = rot * n.value() + (pos - com).cross(&f_w);
        (f_w, n_w)
    };

    // Base columns through the total composite inertia.
    let r0 = poses[0].rot.value();
    for col in 0..6 {
        let e = Vector3::new(
            if col % 3 == 0 { 1.0 } else { 0.0 },
            if col % 3 == 1 { 1.0 } else { 0.0 },
            if col % 3 == 2 { 1.0 } else { 0.0 },
        );
        let motion = if col < 3 {
            Motion { lin: V3::from_f64(&(r0.transpose() * e)), ang: V3::zero() }
        } else {
            Motion { lin: V3::zero(), ang: V3::from_f64(&e) }
        };
        let (h_lin, h_ang) = comp[0].apply(&motion);
        let (f_w, n_w) = to_com(0, &h_lin, &h_ang);
        a.view_mut((0, col), (3, 1)).copy_from(&f_w);
        a.view_mut((3, col), (3, 1)).copy_from(&n_w);
    }
    for ji in 0..tree.joints.len() {
        let child = ji + 1;
        let axis = V3::<f64>::from_f64(&tree.joints[ji].axis);
        let (h_lin, h_ang) = comp[child].apply(&Motion { lin: V3::zero(), ang: axis });
        let (f_w, n_w) = to_com(child, &h_lin, &h_ang);
        a.view_mut((0, 6 + ji), (3, 1)).copy_from(&f_w);
        a.view_mut((3, 6 + ji), (3, 1)).copy_from(&n_w);
    }
    a
}

/// Velocity-product term `Adot(q, v) v` of the centroidal dynamics.
pub fn centroidal_momentum_bias(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
) -> Vector6<f64> {
    let poses = fk_f64(tree, q);
    let vels = kernel::velocity_pass(tree, &poses, &base_motion_f64(v), &v.as_slice()[6..]);
    let (lin, ang) = kernel::centroidal_bias_value::<f64>(tree, &poses, &vels, &v.as_slice()[6..]);
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&lin.value());
    out.fixed_rows_mut::<3>(3).copy_from(&ang.value());
    out
}

/// World CoM position and total mass.
pub fn com_position(tree: &KinematicTree, q: &Configuration) -> (f64, Vector3<f64>) {
    let poses = fk_f64(tree, q);
    let (m, c) = kernel::com_position::<f64>(tree, &poses);
    (m, c.value())
}

/// World positions of all contact frames, in frame order.
pub fn contact_frame_positions(tree: &KinematicTree, q: &Configuration) -> Vec<Vector3<f64>> {
    let poses = fk_f64(tree, q);
    (0..tree.contact_frames.len())
        .map(|i| kernel::frame_position::<f64>(tree, &poses, i).value())
        .collect()
}

/// World linear velocities of all contact frames.
pub fn contact_frame_velocities(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
) -> Vec<Vector3<f64>> {
    let poses = fk_f64(tree, q);
    let vels = kernel::velocity_pass(tree, &poses, &base_motion_f64(v), &v.as_slice()[6..]);
    (0..tree.contact_frames.len())
        .map(|i| kernel::frame_velocity::<f64>(tree, &poses, &vels, i).value())
        .collect()
}

/// World classical accelerations of all contact frames for the given
/// generalized acceleration (gravity does not appear: it is not a motion).
pub fn contact_frame_accelerations(
    tree: &KinematicTree,
    q: &Configuration,
    v: &DVector<f64>,
    a: &DVector<f64>,
) -> Vec<Vector3<f64>> {
    let poses = fk_f64(tree, q);
    let vels = kernel::velocity_pass(tree, &poses, &base_motion_f64(v), &v.as_slice()[6..]);
    let accs = kernel::acceleration_full(
        tree,
        &poses,
        &vels,
        &base_motion_f64(a),
        &v.as_slice()[6..],
        &a.as_slice()[6..],
        false,
    );
    (0..tree.contact_frames.len())
        .map(|i| kernel::frame_acceleration::<f64>(tree, &poses, &vels, &accs, i).value())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{benchmark_tree, nominal_configuration};
    use nalgebra::UnitQuaternion;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_state(
        tree: &KinematicTree,
        rng: &mut StdRng,
    ) -> (Configuration, DVector<f64>) {
        let nv = tree.nv();
        let axis = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let mut q = nominal_configuration(tree);
        q.base_pos += Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.1..0.3),
        );
        q.base_quat = UnitQuaternion::from_scaled_axis(axis) * q.base_quat;
        for i in 0..tree.n_joints() {
            q.joints[i] += rng.random_range(-0.4..0.4);
        }
        let v = DVector::from_fn(nv, |_, _| rng.random_range(-1.0..1.0));
        (q, v)
    }

    fn random_forces(tree: &KinematicTree, rng: &mut StdRng) -> ContactForceSet {
        ContactForceSet(
            (0..tree.contact_frames.len())
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-80.0..80.0),
                        rng.random_range(-80.0..80.0),
                        rng.random_range(0.0..250.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn rnea_zero_motion_no_forces_gives_gravity_load() {
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let g = gravity_forces(&tree, &q);
        // Base linear rows carry the whole weight along +z (world force needed
        // to hold the robot against gravity).
        assert!(g[0].abs() < 1e-9);
        assert!(g[1].abs() < 1e-9);
        assert!((g[2] - tree.total_mass() * tree.gravity).abs() < 1e-9);
    }

    #[test]
    fn rnea_zero_gravity_zero_motion_is_zero() {
        let mut tree = benchmark_tree();
        tree.gravity = 0.0;
        let q = nominal_configuration(&tree);
        let out = rnea(
            &tree,
            &q,
            &DVector::zeros(22),
            &DVector::zeros(22),
            &ContactForceSet::zeros(&tree),
        );
        assert!(out.norm() < 1e-12);
    }

    #[test]
    fn static_equilibrium_base_rows_vanish() {
        // Distribute vertical foot forces so force AND moment balance holds,
        // then the base rows of the inverse dynamics must vanish.
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let (mass, com) = com_position(&tree, &q);
        let feet = contact_frame_positions(&tree, &q);
        // Solve sum w_i = m g, sum (p_i - com) x (0,0,w_i) = 0 by least squares.
        let mut a = DMatrix::zeros(3, 4);
        let mut b = DVector::zeros(3);
        b[0] = mass * tree.gravity;
        for i in 0..4 {
            a[(0, i)] = 1.0;
            a[(1, i)] = feet[i].y - com.y; // x-moment of vertical force
            a[(2, i)] = -(feet[i].x - com.x); // y-moment
        }
        let w = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
        let mut forces = ContactForceSet::zeros(&tree);
        for i in 0..4 {
            forces.0[i] = Vector3::new(0.0, 0.0, w[i]);
        }
        let out = rnea(&tree, &q, &DVector::zeros(22), &DVector::zeros(22), &forces);
        assert!(out.rows(0, 6).norm() < 1e-6, "base residual {}", out.rows(0, 6).norm());
    }

    #[test]
    fn rnea_matches_mass_matrix_composition() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..25 {
            let (q, v) = random_state(&tree, &mut rng);
            let a = DVector::from_fn(22, |_, _| rng.random_range(-3.0..3.0));
            let forces = random_forces(&tree, &mut rng);
            let lhs = rnea(&tree, &q, &v, &a, &forces);

            let m = mass_matrix(&tree, &q);
            let b = bias_forces(&tree, &q, &v);
            let mut jt_f = DVector::zeros(22);
            for (i, jac) in all_contact_jacobians(&tree, &q).iter().enumerate() {
                jt_f += jac.transpose() * forces.0[i];
            }
            let rhs = &m * &a + &b - jt_f;
            let rel = (&lhs - &rhs).norm() / rhs.norm().max(1.0);
            assert!(rel < 1e-10, "relative error {}", rel);
        }
    }

    #[test]
    fn mass_matrix_symmetric_and_spd() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let (q, _) = random_state(&tree, &mut rng);
            let m = mass_matrix(&tree, &q);
            assert!((&m - m.transpose()).norm() < 1e-10);
            assert!(m.cholesky().is_some(), "mass matrix not positive definite");
        }
    }

    #[test]
    fn mass_matrix_single_body_block() {
        let raw = crate::model::urdf::parse_urdf(
            r#"<robot name="s"><link name="b"><inertial><origin xyz="0.1 0 0"/><mass value="3.0"/>
            <inertia ixx="0.2" ixy="0" ixz="0" iyy="0.2" iyz="0" izz="0.2"/></inertial></link></robot>"#,
        )
        .unwrap();
        let tree = crate::model::urdf::build_tree(raw, &Default::default()).unwrap();
        let q = Configuration::identity(0);
        let m = mass_matrix(&tree, &q);
        let top = m.view((0, 0), (3, 3)).clone_owned();
        assert!((top - 3.0 * nalgebra::Matrix3::<f64>::identity()).norm() < 1e-12);
    }

    #[test]
    fn mass_matrix_columns_match_unit_acceleration_rnea() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(17);
        let (q, _) = random_state(&tree, &mut rng);
        let m = mass_matrix(&tree, &q);
        let g = gravity_forces(&tree, &q);
        let zero_f = ContactForceSet::zeros(&tree);
        for j in 0..22 {
            let mut e = DVector::zeros(22);
            e[j] = 1.0;
            let col = rnea(&tree, &q, &DVector::zeros(22), &e, &zero_f) - &g;
            let rel = (&col - m.column(j)).norm() / col.norm().max(1.0);
            assert!(rel < 1e-10, "column {} relative error {}", j, rel);
        }
    }

    #[test]
    fn forward_inverse_dynamics_roundtrip() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let (q, v) = random_state(&tree, &mut rng);
            let tau = DVector::from_fn(16, |_, _| rng.random_range(-60.0..60.0));
            let forces = random_forces(&tree, &mut rng);
            let a = forward_dynamics(&tree, &q, &v, &tau, &forces).unwrap();
            let back = rnea(&tree, &q, &v, &a, &forces);
            assert!(back.rows(0, 6).norm() < 1e-8, "base rows {}", back.rows(0, 6).norm());
            assert!((back.rows(6, 16) - &tau).norm() < 1e-8);
        }
    }

    #[test]
    fn free_fall_acceleration() {
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let a = forward_dynamics(
            &tree,
            &q,
            &DVector::zeros(22),
            &DVector::zeros(16),
            &ContactForceSet::zeros(&tree),
        )
        .unwrap();
        assert!((a[2] + tree.gravity).abs() < 1e-9);
        let mut rest = a.clone();
        rest[2] = 0.0;
        assert!(rest.norm() < 1e-8, "non-free-fall components {}", rest.norm());
    }

    #[test]
    fn forward_dynamics_superposition_in_forces() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(31);
        let (q, v) = random_state(&tree, &mut rng);
        let tau = DVector::from_fn(16, |_, _| rng.random_range(-40.0..40.0));
        let f0 = random_forces(&tree, &mut rng);
        let df = Vector3::new(12.0, -7.0, 30.0);
        let mut f1 = f0.clone();
        f1.0[2] += df;

        let a0 = forward_dynamics(&tree, &q, &v, &tau, &f0).unwrap();
        let a1 = forward_dynamics(&tree, &q, &v, &tau, &f1).unwrap();
        let m = mass_matrix(&tree, &q);
        let j = all_contact_jacobians(&tree, &q)[2].clone();
        let expected = m.cholesky().unwrap().solve(&(j.transpose() * df));
        assert!((a1 - a0 - expected).norm() < 1e-8);
    }

    #[test]
    fn contact_jacobian_matches_frame_velocity() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..10 {
            let (q, v) = random_state(&tree, &mut rng);
            let vels = contact_frame_velocities(&tree, &q, &v);
            for (i, f) in tree.contact_frames.iter().enumerate() {
                let j = contact_jacobian(&tree, &q, &f.name).unwrap();
                assert!((&j * &v - vels[i]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn contact_jacobian_finite_difference() {
        // J v must equal d/dt frame_position along the flow of v.
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(41);
        let (q, v) = random_state(&tree, &mut rng);
        let h = 1e-6;
        let q_plus = crate::model::integrate(&q, &(h * &v)).unwrap();
        let q_minus = crate::model::integrate(&q, &(-h * &v)).unwrap();
        let p_plus = contact_frame_positions(&tree, &q_plus);
        let p_minus = contact_frame_positions(&tree, &q_minus);
        for (i, f) in tree.contact_frames.iter().enumerate() {
            let j = contact_jacobian(&tree, &q, &f.name).unwrap();
            let fd = (p_plus[i] - p_minus[i]) / (2.0 * h);
            assert!((&j * &v - fd).norm() < 1e-6, "frame {} FD mismatch", f.name);
        }
    }

    #[test]
    fn base_translation_moves_all_frames_equally() {
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let mut v = DVector::zeros(22);
        v[0] = 1.0;
        for vel in contact_frame_velocities(&tree, &q, &v) {
            assert!((vel - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn centroidal_momentum_consistency() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..10 {
            let (q, v) = random_state(&tree, &mut rng);
            let (a, h) = centroidal_momentum(&tree, &q, &v);
            assert!((&a * &v - h).norm() < 1e-9, "A v != h_com");

            // Linear rows are total mass times CoM velocity (finite difference).
            let hfd = 1e-6;
            let q_plus = crate::model::integrate(&q, &(hfd * &v)).unwrap();
            let q_minus = crate::model::integrate(&q, &(-hfd * &v)).unwrap();
            let (mass, c_plus) = com_position(&tree, &q_plus);
            let (_, c_minus) = com_position(&tree, &q_minus);
            let com_vel = (c_plus - c_minus) / (2.0 * hfd);
            assert!((h.fixed_rows::<3>(0) - mass * com_vel).norm() < 1e-6);
        }
    }

    #[test]
    fn centroidal_momentum_brute_force_link_sum() {
        // Independent oracle: momentum of each link from its own pose and
        // spatial velocity computed by finite differences of the link pose.
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(47);
        let (q, v) = random_state(&tree, &mut rng);
        let (_, h) = centroidal_momentum(&tree, &q, &v);

        let hfd = 1e-7;
        let q_plus = crate::model::integrate(&q, &(hfd * &v)).unwrap();
        let q_minus = crate::model::integrate(&q, &(-hfd * &v)).unwrap();
        let poses = crate::model::link_poses(&tree, &q);
        let poses_p = crate::model::link_poses(&tree, &q_plus);
        let poses_m = crate::model::link_poses(&tree, &q_minus);
        let (_, com) = com_position(&tree, &q);

        let mut lin = Vector3::zeros();
        let mut ang = Vector3::zeros();
        for (i, link) in tree.links.iter().enumerate() {
            let (rot, pos) = &poses[i];
            let rot_dot = (poses_p[i].0 - poses_m[i].0) / (2.0 * hfd);
            let pos_dot = (poses_p[i].1 - poses_m[i].1) / (2.0 * hfd);
            // World angular velocity from Rdot R^T.
            let w_skew = rot_dot * rot.transpose();
            let omega = Vector3::new(w_skew[(2, 1)], w_skew[(0, 2)], w_skew[(1, 0)]);
            let c_w = pos + rot * link.inertia.com;
            let c_dot = pos_dot + rot_dot * link.inertia.com;
            let p_lin = link.inertia.mass * c_dot;
            // Inertia about the link CoM, world axes.
            let sk = nalgebra::Matrix3::new(
                0.0,
                -link.inertia.com.z,
                link.inertia.com.y,
                link.inertia.com.z,
                0.0,
                -link.inertia.com.x,
                -link.inertia.com.y,
                link.inertia.com.x,
                0.0,
            );
            let i_com = link.inertia.rotational_inertia + link.inertia.mass * sk * sk;
            let i_world = rot * i_com * rot.transpose();
            lin += p_lin;
            ang += i_world * omega + (c_w - com).cross(&p_lin);
        }
        assert!((h.fixed_rows::<3>(0) - lin).norm() < 1e-6 * (1.0 + lin.norm()));
        assert!((h.fixed_rows::<3>(3) - ang).norm() < 1e-6 * (1.0 + ang.norm()));
    }

    #[test]
    fn centroidal_momentum_zero_velocity() {
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let (_, h) = centroidal_momentum(&tree, &q, &DVector::zeros(22));
        assert!(h.norm() < 1e-12);
    }

    #[test]
    fn centroidal_momentum_pure_base_velocity() {
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let mut v = DVector::zeros(22);
        v[0] = 0.7;
        let (_, h) = centroidal_momentum(&tree, &q, &v);
        assert!((h[0] - tree.total_mass() * 0.7).abs() < 1e-9);
        assert!(h[1].abs() < 1e-9 && h[2].abs() < 1e-9);
    }

    #[test]
    fn centroidal_bias_matches_momentum_rate() {
        // d/dt (A v) with zero generalized acceleration equals Adot v.
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(53);
        for _ in 0..5 {
            let (q, v) = random_state(&tree, &mut rng);
            let bias = centroidal_momentum_bias(&tree, &q, &v);
            let h = 1e-6;
            let q_plus = crate::model::integrate(&q, &(h * &v)).unwrap();
            let q_minus = crate::model::integrate(&q, &(-h * &v)).unwrap();
            // v held constant in coordinates (a = 0).
            let (_, h_plus) = centroidal_momentum(&tree, &q_plus, &v);
            let (_, h_minus) = centroidal_momentum(&tree, &q_minus, &v);
            let fd = (h_plus - h_minus) / (2.0 * h);
            assert!((bias - fd).norm() < 1e-5 * (1.0 + fd.norm()), "bias {} fd {}", bias, fd);
        }
    }

    #[test]
    fn centroidal_bias_zero_velocity() {
        let tree = benchmark_tree();
        let q = nominal_configuration(&tree);
        let bias = centroidal_momentum_bias(&tree, &q, &DVector::zeros(22));
        assert!(bias.norm() < 1e-12);
    }

    #[test]
    fn centroidal_bias_pure_translation_has_no_angular_part() {
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(59);
        let (q, _) = random_state(&tree, &mut rng);
        let mut v = DVector::zeros(22);
        v[0] = 0.9;
        v[1] = -0.4;
        v[2] = 0.2;
        let bias = centroidal_momentum_bias(&tree, &q, &v);
        assert!(bias.norm() < 1e-10, "rigid translation momentum is constant");
    }

    #[test]
    fn bias_scales_linearly_with_mass() {
        let tree = benchmark_tree();
        let mut scaled = tree.clone();
        for l in scaled.links.iter_mut() {
            l.inertia.mass *= 2.0;
            l.inertia.rotational_inertia *= 2.0;
        }
        let mut rng = StdRng::seed_from_u64(61);
        let (q, v) = random_state(&tree, &mut rng);
        let b1 = bias_forces(&tree, &q, &v);
        let b2 = bias_forces(&scaled, &q, &v);
        assert!((2.0 * &b1 - &b2).norm() < 1e-9 * b2.norm());
    }

    #[test]
    fn energy_rate_identity() {
        // d/dt (1/2 v^T M v) = v^T (tau_applied - gravity part) for motions
        // driven by forward dynamics; equivalently the Coriolis terms do no
        // work. Checked by finite differences of the kinetic energy.
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(67);
        let (q, v) = random_state(&tree, &mut rng);
        let tau = DVector::from_fn(16, |_, _| rng.random_range(-30.0..30.0));
        let forces = ContactForceSet::zeros(&tree);
        let a = forward_dynamics(&tree, &q, &v, &tau, &forces).unwrap();

        let h = 1e-6;
        let energy = |qq: &Configuration, vv: &DVector<f64>| {
            0.5 * (vv.transpose() * mass_matrix(&tree, qq) * vv)[0]
        };
        let q_plus = crate::model::integrate(&q, &(h * &v)).unwrap();
        let q_minus = crate::model::integrate(&q, &(-h * &v)).unwrap();
        let e_dot_fd = (energy(&q_plus, &(&v + h * &a)) - energy(&q_minus, &(&v - h * &a))) / (2.0 * h);

        // Power from applied torques plus gravity.
        let g = gravity_forces(&tree, &q);
        let mut tau_full = DVector::zeros(22);
        tau_full.rows_mut(6, 16).copy_from(&tau);
        let p = (v.transpose() * (&tau_full - &g))[0];
        assert!(
            (e_dot_fd - p).abs() < 1e-5 * (1.0 + p.abs()),
            "energy rate {} vs power {}",
            e_dot_fd,
            p
        );
    }

    #[test]
    fn newton_euler_centroidal_rate_consistency() {
        // hdot from A a + Adot v equals the net external wrench about the CoM
        // for a motion consistent with the applied forces.
        let tree = benchmark_tree();
        let mut rng = StdRng::seed_from_u64(71);
        let (q, v) = random_state(&tree, &mut rng);
        let tau = DVector::from_fn(16, |_, _| rng.random_range(-40.0..40.0));
        let forces = random_forces(&tree, &mut rng);
        let a = forward_dynamics(&tree, &q, &v, &tau, &forces).unwrap();

        let (amat, _) = centroidal_momentum(&tree, &q, &v);
        let hdot = &amat * &a + centroidal_momentum_bias(&tree, &q, &v);

        let (mass, com) = com_position(&tree, &q);
        let feet = contact_frame_positions(&tree, &q);
        let mut w_lin = Vector3::new(0.0, 0.0, -mass * tree.gravity);
        let mut w_ang = Vector3::zeros();
        for (i, f) in forces.0.iter().enumerate() {
            w_lin += f;
            w_ang += (feet[i] - com).cross(f);
        }
        assert!((hdot.fixed_rows::<3>(0) - w_lin).norm() < 1e-6 * (1.0 + w_lin.norm()));
        assert!((hdot.fixed_rows::<3>(3) - w_ang).norm() < 1e-6 * (1.0 + w_ang.norm()));
    }
}
