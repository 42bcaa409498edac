//! Generic-scalar rigid-body kinematics and dynamics recursions.
//!
//! All passes use body-frame spatial quantities in linear-first order:
//! a link's motion is `(u, w)` where `u` is the velocity of the body-fixed
//! point at the link origin and `w` the angular velocity, both in link axes.
//! Generalized base coordinates follow the crate convention: base linear
//! velocity/acceleration in the world frame, base angular in the body frame.
//!
//! Running these kernels on [`Dual`](crate::scalar::Dual) scalars yields
//! exact directional derivatives of any output.

use crate::geom::{M3, Quat, V3};
use crate::model::{KinematicTree, SpatialInertia};
use crate::scalar::Real;

/// World pose of a link.
#[derive(Clone, Copy, Debug)]
pub struct Pose<S> {
    pub rot: M3<S>,
    pub pos: V3<S>,
}

/// Body-frame spatial motion `(u, w)` at the link origin.
#[derive(Clone, Copy, Debug)]
pub struct Motion<S> {
    pub lin: V3<S>,
    pub ang: V3<S>,
}

/// Generalized base motion: linear part in world axes, angular in body axes.
#[derive(Clone, Copy, Debug)]
pub struct BaseMotion<S> {
    pub lin_world: V3<S>,
    pub ang_body: V3<S>,
}

/// Spatial inertia over a generic scalar, about the frame origin.
#[derive(Clone, Copy, Debug)]
pub struct GInertia<S> {
    pub mass: S,
    pub com: V3<S>,
    pub i_o: M3<S>,
}

impl<S: Real> GInertia<S> {
    pub fn lift(src: &SpatialInertia) -> Self {
        Self {
            mass: S::from_f64(src.mass),
            com: V3::from_f64(&src.com),
            i_o: M3::from_f64(&src.rotational_inertia),
        }
    }

    /// Momentum `(h_lin, h_ang)` about the frame origin for motion `(u, w)`.
    #[inline]
    pub fn apply(&self, m: &Motion<S>) -> (V3<S>, V3<S>) {
        let v_com = m.lin.add(&m.ang.cross(&self.com));
        let h_lin = v_com.scale(self.mass);
        let h_ang = self.i_o.mul_vec(&m.ang).add(&self.com.cross(&m.lin).scale(self.mass));
        (h_lin, h_ang)
    }

    /// Express this inertia in a parent frame; `(rot, trans)` is the pose of
    /// the current frame in the parent frame.
    pub fn transformed(&self, rot: &M3<S>, trans: &V3<S>) -> Self {
        let com_p = rot.mul_vec(&self.com).add(trans);
        let s_c = M3::skew(&self.com);
        let i_com = self.i_o.add(&s_c.mul_mat(&s_c).scale(self.mass));
        let s_p = M3::skew(&com_p);
        let i_origin = rot
            .mul_mat(&i_com)
            .mul_mat(&rot.transpose())
            .sub(&s_p.mul_mat(&s_p).scale(self.mass));
        Self { mass: self.mass, com: com_p, i_o: i_origin }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mass = self.mass + other.mass;
        let com = if mass.value() > 0.0 {
            self.com.scale(self.mass).add(&other.com.scale(other.mass)).scale(S::one() / mass)
        } else {
            V3::zero()
        };
        Self { mass, com, i_o: self.i_o.add(&other.i_o) }
    }
}

/// Rodrigues rotation about a unit axis.
fn joint_rotation<S: Real>(axis: &V3<S>, q: S) -> M3<S> {
    let k = M3::skew(axis);
    let k2 = k.mul_mat(&k);
    M3::identity().add(&k.scale(q.sin())).add(&k2.scale(S::one() - q.cos()))
}

/// World pose of every link.
pub fn forward_kinematics<S: Real>(
    tree: &KinematicTree,
    base_pos: &V3<S>,
    base_quat: &Quat<S>,
    qj: &[S],
) -> Vec<Pose<S>> {
    let mut poses = Vec::with_capacity(tree.links.len());
    poses.push(Pose { rot: base_quat.to_matrix(), pos: *base_pos });
    for (ji, joint) in tree.joints.iter().enumerate() {
        let parent = &poses[joint.parent_link];
        let e = M3::<S>::from_f64(&joint.origin_rotation);
        let d = V3::<S>::from_f64(&joint.origin_translation);
        let axis = V3::<S>::from_f64(&joint.axis);
        let rq = joint_rotation(&axis, qj[ji]);
        let rot = parent.rot.mul_mat(&e).mul_mat(&rq);
        let pos = parent.pos.add(&parent.rot.mul_vec(&d));
        poses.push(Pose { rot, pos });
    }
    poses
}

/// Body-frame spatial velocity of every link.
pub fn velocity_pass<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    base: &BaseMotion<S>,
    qd: &[S],
) -> Vec<Motion<S>> {
    let mut vels = Vec::with_capacity(tree.links.len());
    vels.push(Motion {
        lin: poses[0].rot.tr_mul_vec(&base.lin_world),
        ang: base.ang_body,
    });
    for (ji, joint) in tree.joints.iter().enumerate() {
        let p = joint.parent_link;
        let child = ji + 1;
        // Rotation taking parent coords to child coords.
        let x = poses[child].rot.transpose().mul_mat(&poses[p].rot);
        let d = V3::<S>::from_f64(&joint.origin_translation);
        let axis = V3::<S>::from_f64(&joint.axis);
        let vp = &vels[p];
        let ang = x.mul_vec(&vp.ang).add(&axis.scale(qd[ji]));
        let lin = x.mul_vec(&vp.lin.add(&vp.ang.cross(&d)));
        vels.push(Motion { lin, ang });
    }
    vels
}

/// Full inverse dynamics: generalized forces `[f_base_world, n_base_body, tau_j]`
/// required to realize `(v, a)` under gravity and external frame forces.
///
/// `ext_forces` holds one world-frame linear force per contact frame, applied
/// at the frame origin; the result already includes the `-J^T F` contribution.
pub fn rnea_generic<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    base_vel: &BaseMotion<S>,
    qd: &[S],
    base_acc: &BaseMotion<S>,
    qdd: &[S],
    ext_forces: &[V3<S>],
) -> Vec<S> {
    let n = tree.links.len();
    let vels = velocity_pass(tree, poses, base_vel, qd);
    let accs = acceleration_full(tree, poses, &vels, base_acc, qd, qdd, true);

    // Per-link net wrench, minus external contact forces.
    let mut forces: Vec<(V3<S>, V3<S>)> = Vec::with_capacity(n);
    for i in 0..n {
        let inertia = GInertia::<S>::lift(&tree.links[i].inertia);
        let (h_lin, h_ang) = inertia.apply(&vels[i]);
        let (ia_lin, ia_ang) = inertia.apply(&accs[i]);
        let f_lin = ia_lin.add(&vels[i].ang.cross(&h_lin));
        let f_ang = ia_ang
            .add(&vels[i].ang.cross(&h_ang))
            .add(&vels[i].lin.cross(&h_lin));
        forces.push((f_lin, f_ang));
    }
    for (fi, frame) in tree.contact_frames.iter().enumerate() {
        let link = frame.link;
        let f_body = poses[link].rot.tr_mul_vec(&ext_forces[fi]);
        let off = V3::<S>::from_f64(&frame.offset);
        forces[link].0 = forces[link].0.sub(&f_body);
        forces[link].1 = forces[link].1.sub(&off.cross(&f_body));
    }

    let nv = tree.nv();
    let mut out = vec![S::zero(); nv];
    for child in (1..n).rev() {
        let ji = child - 1;
        let joint = &tree.joints[ji];
        let axis = V3::<S>::from_f64(&joint.axis);
        out[6 + ji] = axis.dot(&forces[child].1);
        let p = joint.parent_link;
        let r_rel = poses[p].rot.transpose().mul_mat(&poses[child].rot);
        let d = V3::<S>::from_f64(&joint.origin_translation);
        let f_lin_p = r_rel.mul_vec(&forces[child].0);
        let n_p = r_rel.mul_vec(&forces[child].1).add(&d.cross(&f_lin_p));
        forces[p].0 = forces[p].0.add(&f_lin_p);
        forces[p].1 = forces[p].1.add(&n_p);
    }
    let f_world = poses[0].rot.mul_vec(&forces[0].0);
    out[0] = f_world.0[0];
    out[1] = f_world.0[1];
    out[2] = f_world.0[2];
    out[3] = forces[0].1 .0[0];
    out[4] = forces[0].1 .0[1];
    out[5] = forces[0].1 .0[2];
    out
}

/// Acceleration pass that also needs the joint rates for the velocity-product
/// terms (the public entry point).
pub fn acceleration_full<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    vels: &[Motion<S>],
    base_acc: &BaseMotion<S>,
    qd: &[S],
    qdd: &[S],
    with_gravity: bool,
) -> Vec<Motion<S>> {
    let mut accs = Vec::with_capacity(tree.links.len());
    let mut lin_w = base_acc.lin_world;
    if with_gravity {
        lin_w.0[2] += S::from_f64(tree.gravity);
    }
    accs.push(Motion {
        lin: poses[0].rot.tr_mul_vec(&lin_w).sub(&vels[0].ang.cross(&vels[0].lin)),
        ang: base_acc.ang_body,
    });
    for (ji, joint) in tree.joints.iter().enumerate() {
        let p = joint.parent_link;
        let child = ji + 1;
        let x = poses[child].rot.transpose().mul_mat(&poses[p].rot);
        let d = V3::<S>::from_f64(&joint.origin_translation);
        let axis = V3::<S>::from_f64(&joint.axis);
        let ap = accs[p];
        let vc = &vels[child];
        let ang = x
            .mul_vec(&ap.ang)
            .add(&axis.scale(qdd[ji]))
            .add(&vc.ang.cross(&axis).scale(qd[ji]));
        let lin = x
            .mul_vec(&ap.lin.add(&ap.ang.cross(&d)))
            .add(&vc.lin.cross(&axis).scale(qd[ji]));
        accs.push(Motion { lin, ang });
    }
    accs
}

/// Total mass and world CoM position.
pub fn com_position<S: Real>(tree: &KinematicTree, poses: &[Pose<S>]) -> (S, V3<S>) {
    let mut mass = S::zero();
    let mut weighted = V3::zero();
    for (link, pose) in tree.links.iter().zip(poses.iter()) {
        let m = S::from_f64(link.inertia.mass);
        let c_w = pose.pos.add(&pose.rot.mul_vec(&V3::from_f64(&link.inertia.com)));
        mass += m;
        weighted = weighted.add(&c_w.scale(m));
    }
    (mass, weighted.scale(S::one() / mass))
}

/// Centroidal momentum `(linear, angular about the CoM)`, world axes.
pub fn centroidal_momentum_value<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    vels: &[Motion<S>],
) -> (V3<S>, V3<S>) {
    let (_, com) = com_position(tree, poses);
    let mut lin = V3::zero();
    let mut ang = V3::zero();
    for i in 0..tree.links.len() {
        let inertia = GInertia::<S>::lift(&tree.links[i].inertia);
        let (h_lin, h_ang) = inertia.apply(&vels[i]);
        let f_w = poses[i].rot.mul_vec(&h_lin);
        let n_w = poses[i].rot.mul_vec(&h_ang).add(&poses[i].pos.sub(&com).cross(&f_w));
        lin = lin.add(&f_w);
        ang = ang.add(&n_w);
    }
    (lin, ang)
}

/// Rate of the centroidal momentum for link accelerations `accs`:
/// `A(q) a + Adot(q, v) v`, gravity excluded.
pub fn centroidal_rate_value<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    vels: &[Motion<S>],
    accs: &[Motion<S>],
) -> (V3<S>, V3<S>) {
    let (_, com) = com_position(tree, poses);
    let mut lin = V3::zero();
    let mut ang = V3::zero();
    for i in 0..tree.links.len() {
        let inertia = GInertia::<S>::lift(&tree.links[i].inertia);
        let (h_lin, h_ang) = inertia.apply(&vels[i]);
        let (ia_lin, ia_ang) = inertia.apply(&accs[i]);
        let f_lin = ia_lin.add(&vels[i].ang.cross(&h_lin));
        let f_ang = ia_ang
            .add(&vels[i].ang.cross(&h_ang))
            .add(&vels[i].lin.cross(&h_lin));
        let f_w = poses[i].rot.mul_vec(&f_lin);
        let n_w = poses[i].rot.mul_vec(&f_ang).add(&poses[i].pos.sub(&com).cross(&f_w));
        lin = lin.add(&f_w);
        ang = ang.add(&n_w);
    }
    (lin, ang)
}

/// Velocity-product rate of the centroidal momentum: `Adot(q, v) * v`,
/// i.e. the rate of `h_com` along a trajectory with zero generalized
/// acceleration, gravity excluded.
pub fn centroidal_bias_value<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    vels: &[Motion<S>],
    qd: &[S],
) -> (V3<S>, V3<S>) {
    let zero_base = BaseMotion { lin_world: V3::zero(), ang_body: V3::zero() };
    let zero_qdd = vec![S::zero(); tree.joints.len()];
    let accs = acceleration_full(tree, poses, vels, &zero_base, qd, &zero_qdd, false);
    centroidal_rate_value(tree, poses, vels, &accs)
}

/// Composite rigid-body inertia of each subtree, in link coordinates.
pub fn composite_inertias<S: Real>(tree: &KinematicTree, poses: &[Pose<S>]) -> Vec<GInertia<S>> {
    let n = tree.links.len();
    let mut comp: Vec<GInertia<S>> =
        tree.links.iter().map(|l| GInertia::lift(&l.inertia)).collect();
    for child in (1..n).rev() {
        let joint = &tree.joints[child - 1];
        let p = joint.parent_link;
        let rot_rel = poses[p].rot.transpose().mul_mat(&poses[child].rot);
        let d = V3::<S>::from_f64(&joint.origin_translation);
        let shifted = comp[child].transformed(&rot_rel, &d);
        comp[p] = comp[p].add(&shifted);
    }
    comp
}

/// World position of a contact frame origin.
pub fn frame_position<S: Real>(tree: &KinematicTree, poses: &[Pose<S>], frame: usize) -> V3<S> {
    let f = &tree.contact_frames[frame];
    poses[f.link].pos.add(&poses[f.link].rot.mul_vec(&V3::from_f64(&f.offset)))
}

/// World linear velocity of a contact frame origin.
pub fn frame_velocity<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    vels: &[Motion<S>],
    frame: usize,
) -> V3<S> {
    let f = &tree.contact_frames[frame];
    let off = V3::<S>::from_f64(&f.offset);
    let v_body = vels[f.link].lin.add(&vels[f.link].ang.cross(&off));
    poses[f.link].rot.mul_vec(&v_body)
}

/// World classical acceleration of a contact frame origin.
pub fn frame_acceleration<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    vels: &[Motion<S>],
    accs: &[Motion<S>],
    frame: usize,
) -> V3<S> {
    let f = &tree.contact_frames[frame];
    let off = V3::<S>::from_f64(&f.offset);
    let l = f.link;
    let term = accs[l]
        .lin
        .add(&accs[l].ang.cross(&off))
        .add(&vels[l].ang.cross(&vels[l].lin.add(&vels[l].ang.cross(&off))));
    poses[l].rot.mul_vec(&term)
}

/// Net external wrench about the CoM from contact-frame forces plus gravity:
/// the physical rate of change of the centroidal momentum.
pub fn net_wrench_about_com<S: Real>(
    tree: &KinematicTree,
    poses: &[Pose<S>],
    forces: &[V3<S>],
) -> (V3<S>, V3<S>) {
    let (mass, com) = com_position(tree, poses);
    let mut lin = V3::zero();
    let mut ang = V3::zero();
    for (fi, _) in tree.contact_frames.iter().enumerate() {
        let x = frame_position(tree, poses, fi);
        lin = lin.add(&forces[fi]);
        ang = ang.add(&x.sub(&com).cross(&forces[fi]));
    }
    lin.0[2] += mass * S::from_f64(-tree.gravity);
    (lin, ang)
}
