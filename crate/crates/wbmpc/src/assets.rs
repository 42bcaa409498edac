//! Bundled benchmark robot model and its canonical loading options.
//!
//! The quadruped-plus-arm model ships in-repo (`models/b2z1.urdf`). Locking
//! the last two arm joints reduces it to 22 degrees of freedom: 6 base,
//! 12 legs, 4 arm. Inertial values are repo-chosen with a total mass of
//! 74.5 kg; they are plausible for this robot class but not measured data.

use crate::model::urdf::{self, ContactFrameSpec, ModelOptions};
use crate::model::{Configuration, KinematicTree};
use nalgebra::Vector3;

/// The benchmark robot description.
pub const B2Z1_URDF: &str = include_str!("../../../models/b2z1.urdf");

/// Outward hip-roll angle of the nominal stance; widens the support
/// polygon for lateral stability.
pub const NOMINAL_HIP_SPREAD: f64 = 0.06;

/// Nominal standing height of the base. Both leg segments are 0.35 m with
/// thigh 0.8 rad and calf -1.6 rad, so the in-plane drop below the thigh
/// mount is 2 * 0.35 * cos(0.8); the outward hip roll tilts that drop and
/// raises the mount point (0.09 m from the hip axis) by its sine.
pub fn nominal_base_height() -> f64 {
    2.0 * 0.35 * (0.8_f64).cos() * NOMINAL_HIP_SPREAD.cos() - 0.09 * NOMINAL_HIP_SPREAD.sin()
}

/// Canonical options: last two arm joints locked, four foot frames plus the
/// arm end-effector in the fixed order [FL, FR, RL, RR, EE].
pub fn benchmark_options() -> ModelOptions {
    let foot = Vector3::new(0.0, 0.0, -0.35);
    ModelOptions {
        locked_joints: vec!["z1_joint5".into(), "z1_joint6".into()],
        contact_frames: vec![
            ContactFrameSpec { name: "FL_foot".into(), parent_link: "FL_calf".into(), offset: foot },
            ContactFrameSpec { name: "FR_foot".into(), parent_link: "FR_calf".into(), offset: foot },
            ContactFrameSpec { name: "RL_foot".into(), parent_link: "RL_calf".into(), offset: foot },
            ContactFrameSpec { name: "RR_foot".into(), parent_link: "RR_calf".into(), offset: foot },
            ContactFrameSpec {
                name: "arm_ee".into(),
                parent_link: "z1_link6".into(),
                offset: Vector3::new(0.12, 0.0, 0.0),
            },
        ],
    }
}

/// Load the bundled benchmark model with canonical options.
pub fn benchmark_tree() -> KinematicTree {
    let raw = urdf::parse_urdf(B2Z1_URDF).expect("bundled model parses");
    urdf::build_tree(raw, &benchmark_options()).expect("bundled model builds")
}

/// Nominal standing configuration used as the cost reference: legs bent
/// symmetrically, arm reaching forward, base at standing height.
pub fn nominal_configuration(tree: &KinematicTree) -> Configuration {
    let mut q = Configuration::identity(tree.n_joints());
    q.base_pos = Vector3::new(0.0, 0.0, nominal_base_height());
    // Hip roll spreads outward: +x axis, so left legs (+y) roll positive.
    let spread = [NOMINAL_HIP_SPREAD, -NOMINAL_HIP_SPREAD, NOMINAL_HIP_SPREAD, -NOMINAL_HIP_SPREAD];
    for leg in 0..4 {
        q.joints[3 * leg] = spread[leg];
        q.joints[3 * leg + 1] = 0.8;
        q.joints[3 * leg + 2] = -1.6;
    }
    if tree.n_joints() >= 16 {
        q.joints[12] = 0.0;
        q.joints[13] = 0.75;
        q.joints[14] = -1.5;
        q.joints[15] = 0.75;
    }
    q
}
