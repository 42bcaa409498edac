//! Floating-base kinematic tree, robot state, and configuration-manifold ops.
//!
//! The configuration is `q = [p_b, q_b, q_j]` with a unit-quaternion base
//! orientation. Velocities are `v = [v_b (world), w_b (body), qd_j]`: base
//! linear velocity in the world frame, base angular velocity in the body
//! frame. Tangent increments follow the same layout, with the base rotation
//! increment living in the tangent of SO(3) (body frame).

pub mod urdf;

use crate::geom::{Quat, V3};
use crate::scalar::Real;
use nalgebra::{DVector, Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model XML: {0}")]
    MalformedXml(String),
    #[error("unknown element <{0}> in model file")]
    UnknownElement(String),
    #[error("unsupported joint type '{kind}' on joint '{joint}'")]
    UnsupportedJoint { joint: String, kind: String },
    #[error("link '{0}' referenced by a joint is not defined")]
    UnknownLink(String),
    #[error("tree is disconnected: link '{0}' is not reachable from the root")]
    DisconnectedTree(String),
    #[error("link '{0}' has no inertial data")]
    MissingInertial(String),
    #[error("invalid inertia on link '{link}': {reason}")]
    InvalidInertia { link: String, reason: String },
    #[error("invalid limits on joint '{joint}': {reason}")]
    InvalidLimits { joint: String, reason: String },
    #[error("joint axis on '{0}' is not unit norm")]
    InvalidAxis(String),
    #[error("model has multiple roots or multiple floating joints")]
    MultipleRoots,
    #[error("unknown frame '{0}'")]
    UnknownFrame(String),
    #[error("locked joint '{0}' not found in model")]
    UnknownLockedJoint(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("io error reading model: {0}")]
    Io(String),
}

/// Mass, center of mass, and rotational inertia of one link.
///
/// The rotational inertia is expressed about the link-frame origin, in
/// link-frame axes.
#[derive(Clone, Debug)]
pub struct SpatialInertia {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub rotational_inertia: Matrix3<f64>,
}

impl SpatialInertia {
    pub fn zero() -> Self {
        Self {
            mass: 0.0,
            com: Vector3::zeros(),
            rotational_inertia: Matrix3::zeros(),
        }
    }

    /// Validity per the model contract: nonnegative mass, symmetric PSD
    /// rotational inertia, and principal moments satisfying the triangle
    /// inequalities (checked about the center of mass).
    pub fn validate(&self, link: &str) -> Result<(), ModelError> {
        if self.mass < 0.0 || !self.mass.is_finite() {
            return Err(ModelError::InvalidInertia {
                link: link.to_string(),
                reason: format!("mass {} is negative or non-finite", self.mass),
            });
        }
        let i = &self.rotational_inertia;
        if (i - i.transpose()).norm() > 1e-9 * (1.0 + i.norm()) {
            return Err(ModelError::InvalidInertia {
                link: link.to_string(),
                reason: "rotational inertia not symmetric".into(),
            });
        }
        if self.mass == 0.0 {
            return Ok(());
        }
        // Principal moments about the CoM.
        let c = self.com;
        let i_com = i - self.mass * (c.norm_squared() * Matrix3::identity() - c * c.transpose());
        let eig = i_com.symmetric_eigenvalues();
        let tol = 1e-9 * (1.0 + i.norm());
        let (a, b, cc) = (eig[0], eig[1], eig[2]);
        if a < -tol || b < -tol || cc < -tol {
            return Err(ModelError::InvalidInertia {
                link: link.to_string(),
                reason: "rotational inertia not positive semidefinite".into(),
            });
        }
        if a + b < cc - tol || a + cc < b - tol || b + cc < a - tol {
            return Err(ModelError::InvalidInertia {
                link: link.to_string(),
                reason: "principal moments violate the triangle inequality".into(),
            });
        }
        Ok(())
    }

    /// Express this inertia in a parent frame, given the pose (rot, trans) of
    /// the current frame in the parent frame.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        let com_p = rot * self.com + trans;
        // Shift about-origin inertia to the CoM, rotate, shift back.
        let sk = |v: &Vector3<f64>| {
            Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
        };
        let s_c = sk(&self.com);
        let i_com = self.rotational_inertia + self.mass * s_c * s_c;
        let s_p = sk(&com_p);
        let i_origin_p = rot * i_com * rot.transpose() - self.mass * s_p * s_p;
        Self {
            mass: self.mass,
            com: com_p,
            rotational_inertia: i_origin_p,
        }
    }

    /// Sum of two inertias expressed in the same frame.
    pub fn add(&self, other: &Self) -> Self {
        let mass = self.mass + other.mass;
        let com = if mass > 0.0 {
            (self.mass * self.com + other.mass * other.com) / mass
        } else {
            Vector3::zeros()
        };
        Self {
            mass,
            com,
            rotational_inertia: self.rotational_inertia + other.rotational_inertia,
        }
    }
}

/// Supported joint kinds after loading. Fixed joints are merged away.
#[derive(Clone, Debug, PartialEq)]
pub enum JointKind {
    FloatingBase,
    Revolute,
}

/// A single-DoF revolute joint (or the implicit floating base at the root).
#[derive(Clone, Debug)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Parent link index (`usize::MAX` for the floating base).
    pub parent_link: usize,
    pub child_link: usize,
    /// Pose of the joint frame in the parent link frame.
    pub origin_rotation: Matrix3<f64>,
    pub origin_translation: Vector3<f64>,
    /// Rotation axis in the child/joint frame (revolute only).
    pub axis: Vector3<f64>,
    pub position_limits: (f64, f64),
    pub velocity_limit: f64,
    pub effort_limit: f64,
}

#[derive(Clone, Debug)]
pub struct Link {
    pub name: String,
    pub inertia: SpatialInertia,
}

/// Named frame rigidly attached to a link (feet, arm end-effector).
#[derive(Clone, Debug)]
pub struct ContactFrame {
    pub name: String,
    pub link: usize,
    pub offset: Vector3<f64>,
}

/// Immutable floating-base robot model.
///
/// Links are stored in topological order: link 0 is the floating base;
/// link `i >= 1` is connected to its parent by `joints[i - 1]`.
#[derive(Clone, Debug)]
pub struct KinematicTree {
    pub links: Vec<Link>,
    /// Revolute joints; `joints[i]` has `child_link == i + 1`.
    pub joints: Vec<Joint>,
    pub contact_frames: Vec<ContactFrame>,
    /// Gravity magnitude, acting along world -z.
    pub gravity: f64,
}

impl KinematicTree {
    /// Number of actuated (revolute) joints.
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Velocity dimension: 6 (base) + revolute DoF.
    pub fn nv(&self) -> usize {
        6 + self.joints.len()
    }

    /// Configuration dimension: 7 (base) + revolute DoF.
    pub fn nq(&self) -> usize {
        7 + self.joints.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.inertia.mass).sum()
    }

    pub fn frame_index(&self, name: &str) -> Result<usize, ModelError> {
        self.contact_frames
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| ModelError::UnknownFrame(name.to_string()))
    }

    /// Per-joint effort limits in joint order.
    pub fn effort_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.joints.len(), self.joints.iter().map(|j| j.effort_limit))
    }

    pub fn velocity_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.joints.len(), self.joints.iter().map(|j| j.velocity_limit))
    }

    pub fn position_limits(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = DVector::from_iterator(self.joints.len(), self.joints.iter().map(|j| j.position_limits.0));
        let hi = DVector::from_iterator(self.joints.len(), self.joints.iter().map(|j| j.position_limits.1));
        (lo, hi)
    }
}

/// Generalized configuration: base pose plus joint angles.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    pub base_pos: Vector3<f64>,
    pub base_quat: UnitQuaternion<f64>,
    pub joints: DVector<f64>,
}

impl Configuration {
    pub fn identity(n_joints: usize) -> Self {
        Self {
            base_pos: Vector3::zeros(),
            base_quat: UnitQuaternion::identity(),
            joints: DVector::zeros(n_joints),
        }
    }

    pub fn nv(&self) -> usize {
        6 + self.joints.len()
    }

    /// Flat representation `[p(3), quat wxyz(4), q_j]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = 7 + self.joints.len();
        let mut out = DVector::zeros(n);
        out.fixed_rows_mut::<3>(0).copy_from(&self.base_pos);
        out[3] = self.base_quat.w;
        out[4] = self.base_quat.i;
        out[5] = self.base_quat.j;
        out[6] = self.base_quat.k;
        out.rows_mut(7, self.joints.len()).copy_from(&self.joints);
        out
    }

    pub fn from_vector(q: &DVector<f64>) -> Self {
        let nj = q.len() - 7;
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[4], q[5], q[6]));
        Self {
            base_pos: Vector3::new(q[0], q[1], q[2]),
            base_quat: quat,
            joints: q.rows(7, nj).into_owned(),
        }
    }
}

/// Full robot state: configuration plus generalized velocity.
#[derive(Clone, Debug)]
pub struct RobotState {
    pub q: Configuration,
    /// `[v_b world (3), w_b body (3), qd_j]`.
    pub v: DVector<f64>,
}

impl RobotState {
    pub fn zero(tree: &KinematicTree) -> Self {
        Self {
            q: Configuration::identity(tree.n_joints()),
            v: DVector::zeros(tree.nv()),
        }
    }

    pub fn validate(&self, tree: &KinematicTree) -> Result<(), ModelError> {
        if self.q.joints.len() != tree.n_joints() {
            return Err(ModelError::DimensionMismatch {
                expected: tree.n_joints(),
                got: self.q.joints.len(),
            });
        }
        if self.v.len() != tree.nv() {
            return Err(ModelError::DimensionMismatch {
                expected: tree.nv(),
                got: self.v.len(),
            });
        }
        let n = self.q.base_quat.as_ref().norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(ModelError::MalformedXml(format!(
                "base quaternion norm {} deviates from 1",
                n
            )));
        }
        Ok(())
    }
}

/// Manifold update `q (+) dq`: world-frame base translation increment,
/// body-frame base rotation increment through the exponential map,
/// componentwise joint increments. The result quaternion is renormalized.
pub fn integrate(q: &Configuration, dq: &DVector<f64>) -> Result<Configuration, ModelError> {
    let nv = q.nv();
    if dq.len() != nv {
        return Err(ModelError::DimensionMismatch { expected: nv, got: dq.len() });
    }
    let nj = q.joints.len();
    let (pos, quat, joints) = integrate_parts(
        q,
        &V3::<f64>::from_f64(&Vector3::new(dq[0], dq[1], dq[2])),
        &V3::<f64>::from_f64(&Vector3::new(dq[3], dq[4], dq[5])),
        &(0..nj).map(|i| dq[6 + i]).collect::<Vec<_>>(),
    );
    let w = quat.normalize();
    Ok(Configuration {
        base_pos: pos.value(),
        base_quat: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            w.0[0].value(),
            w.0[1].value(),
            w.0[2].value(),
            w.0[3].value(),
        )),
        joints: DVector::from_vec(joints),
    })
}

/// Generic-scalar integrate used by derivative sweeps. The reference
/// configuration is plain `f64`; the increment carries the scalar type.
pub fn integrate_parts<S: Real>(
    q: &Configuration,
    dpos: &V3<S>,
    drot: &V3<S>,
    djoints: &[S],
) -> (V3<S>, Quat<S>, Vec<S>) {
    let pos = V3::from_f64(&q.base_pos).add(dpos);
    let qb = Quat::<S>::from_wxyz(q.base_quat.w, q.base_quat.i, q.base_quat.j, q.base_quat.k);
    let quat = qb.mul(&Quat::exp(drot));
    let joints = q
        .joints
        .iter()
        .zip(djoints.iter())
        .map(|(a, d)| S::from_f64(*a) + *d)
        .collect();
    (pos, quat, joints)
}

/// Tangent-space difference such that `integrate(qa, difference(qa, qb)) = qb`
/// up to quaternion sign.
pub fn difference(qa: &Configuration, qb: &Configuration) -> Result<DVector<f64>, ModelError> {
    if qa.joints.len() != qb.joints.len() {
        return Err(ModelError::DimensionMismatch {
            expected: qa.joints.len(),
            got: qb.joints.len(),
        });
    }
    let nv = qa.nv();
    let mut out = DVector::zeros(nv);
    let dp = qb.base_pos - qa.base_pos;
    out.fixed_rows_mut::<3>(0).copy_from(&dp);
    let rel = qa.base_quat.inverse() * qb.base_quat;
    let q = Quat::<f64>([rel.w, rel.i, rel.j, rel.k]);
    let dtheta = q.log();
    out[3] = dtheta.0[0];
    out[4] = dtheta.0[1];
    out[5] = dtheta.0[2];
    for i in 0..qa.joints.len() {
        out[6 + i] = qb.joints[i] - qa.joints[i];
    }
    Ok(out)
}

/// Generic difference used inside cost/constraint kernels: the perturbed
/// configuration is given as `(pos, quat, joints)` over `S`.
pub fn difference_parts<S: Real>(
    q_ref: &Configuration,
    pos: &V3<S>,
    quat: &Quat<S>,
    joints: &[S],
) -> Vec<S> {
    let nv = 6 + joints.len();
    let mut out = Vec::with_capacity(nv);
    let p_ref = V3::<S>::from_f64(&q_ref.base_pos);
    let dp = pos.sub(&p_ref);
    out.extend_from_slice(&dp.0);
    let q_ref_quat =
        Quat::<S>::from_wxyz(q_ref.base_quat.w, q_ref.base_quat.i, q_ref.base_quat.j, q_ref.base_quat.k);
    let rel = q_ref_quat.conjugate().mul(quat);
    let dtheta = rel.log();
    out.extend_from_slice(&dtheta.0);
    for (i, j) in joints.iter().enumerate() {
        out.push(*j - S::from_f64(q_ref.joints[i]));
    }
    out
}

/// World pose of every link: `(rotation, origin)` pairs, indexed like links.
pub fn link_poses(tree: &KinematicTree, q: &Configuration) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let poses = crate::dynamics::kernel::forward_kinematics::<f64>(
        tree,
        &V3::from_f64(&q.base_pos),
        &Quat::from_wxyz(q.base_quat.w, q.base_quat.i, q.base_quat.j, q.base_quat.k),
        q.joints.as_slice(),
    );
    poses.iter().map(|p| (p.rot.value(), p.pos.value())).collect()
}

/// World pose of a named contact frame.
pub fn frame_placement(
    tree: &KinematicTree,
    q: &Configuration,
    frame_name: &str,
) -> Result<(Matrix3<f64>, Vector3<f64>), ModelError> {
    let idx = tree.frame_index(frame_name)?;
    let frame = &tree.contact_frames[idx];
    let poses = link_poses(tree, q);
    let (rot, pos) = &poses[frame.link];
    Ok((*rot, pos + rot * frame.offset))
}

/// Load a kinematic tree from a URDF-subset file with default options.
pub fn load_model(file_path: &str) -> Result<KinematicTree, ModelError> {
    let text = std::fs::read_to_string(file_path).map_err(|e| ModelError::Io(e.to_string()))?;
    let parsed = urdf::parse_urdf(&text)?;
    urdf::build_tree(parsed, &urdf::ModelOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::benchmark_tree;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_config(nj: usize, rng: &mut StdRng) -> Configuration {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let quat = UnitQuaternion::from_scaled_axis(axis);
        Configuration {
            base_pos: Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0),
            ),
            base_quat: quat,
            joints: DVector::from_fn(nj, |_, _| rng.random_range(-1.5..1.5)),
        }
    }

    #[test]
    fn integrate_identity_increment() {
        let q = Configuration::identity(3);
        let dq = DVector::zeros(9);
        let out = integrate(&q, &dq).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn integrate_quarter_yaw() {
        let q = Configuration::identity(0);
        let mut dq = DVector::zeros(6);
        dq[5] = std::f64::consts::FRAC_PI_2;
        let out = integrate(&q, &dq).unwrap();
        assert!((out.base_quat.w - (std::f64::consts::FRAC_PI_4).cos()).abs() < 1e-12);
        assert!((out.base_quat.k - (std::f64::consts::FRAC_PI_4).sin()).abs() < 1e-12);
    }

    #[test]
    fn difference_of_equal_configs_is_zero() {
        let mut rng = StdRng::seed_from_u64(7);
        let q = random_config(5, &mut rng);
        let d = difference(&q, &q).unwrap();
        assert!(d.norm() < 1e-14);
    }

    #[test]
    fn difference_pure_yaw() {
        let qa = Configuration::identity(0);
        let mut qb = Configuration::identity(0);
        qb.base_quat = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let d = difference(&qa, &qb).unwrap();
        assert!((d[5] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(d.rows(0, 5).norm() < 1e-12);
    }

    #[test]
    fn integrate_difference_roundtrip() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..200 {
            let q = random_config(4, &mut rng);
            let dq = DVector::from_fn(10, |_, _| rng.random_range(-0.5..0.5));
            let q2 = integrate(&q, &dq).unwrap();
            let back = difference(&q, &q2).unwrap();
            assert!((&back - &dq).norm() < 1e-10, "roundtrip error {}", (&back - &dq).norm());
        }
    }

    #[test]
    fn integrate_preserves_unit_quaternion() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut q = random_config(2, &mut rng);
        for _ in 0..500 {
            let dq = DVector::from_fn(8, |_, _| rng.random_range(-0.3..0.3));
            q = integrate(&q, &dq).unwrap();
            assert!((q.base_quat.as_ref().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_placement_equivariance() {
        let tree = benchmark_tree();
        let q_nom = crate::assets::nominal_configuration(&tree);
        let poses0 = tree
            .contact_frames
            .iter()
            .map(|f| frame_placement(&tree, &q_nom, &f.name).unwrap().1)
            .collect::<Vec<_>>();

        // Translate the base: all frames translate identically.
        let mut q_shift = q_nom.clone();
        let d = Vector3::new(0.7, -0.3, 0.2);
        q_shift.base_pos += d;
        for (f, p0) in tree.contact_frames.iter().zip(poses0.iter()) {
            let p = frame_placement(&tree, &q_shift, &f.name).unwrap().1;
            assert!((p - (p0 + d)).norm() < 1e-12);
        }

        // Yaw the base 180 deg about its own origin: x,y mirror about the base.
        let mut q_yaw = q_nom.clone();
        q_yaw.base_quat =
            UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, std::f64::consts::PI)) * q_nom.base_quat;
        for (f, p0) in tree.contact_frames.iter().zip(poses0.iter()) {
            let p = frame_placement(&tree, &q_yaw, &f.name).unwrap().1;
            let rel0 = p0 - q_nom.base_pos;
            let rel = p - q_yaw.base_pos;
            assert!((rel.x + rel0.x).abs() < 1e-12);
            assert!((rel.y + rel0.y).abs() < 1e-12);
            assert!((rel.z - rel0.z).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_frame_is_an_error() {
        let tree = benchmark_tree();
        let q = crate::assets::nominal_configuration(&tree);
        assert!(matches!(
            frame_placement(&tree, &q, "no_such_frame"),
            Err(ModelError::UnknownFrame(_))
        ));
    }
}
