//! Stage-wise optimal control problems for six dynamics formulations.
//!
//! Each problem covers `N` nodes on a (possibly geometric) time grid. States
//! and inputs per formulation:
//!
//! | formulation      | state       | input (per stage)       | dynamics
//! |------------------|-------------|-------------------------|------------------------------
//! | WbInvDyn         | `[dq, v]`   | `[tau (k<=2), a, F]`    | inverse-dynamics path rows
//! | WbFwdDyn         | `[dq, v]`   | `[tau, F]`              | forward dynamics in transition
//! | CentVelPath      | `[h, dq]`   | `[v, F]`                | `h = A v` path rows
//! | CentVelEmbedded  | `[h, dq]`   | `[v_j, F]`              | base velocity eliminated
//! | CentAccPath      | `[dq, v]`   | `[a, F]`                | `Adot v + A a = w` path rows
//! | CentAccEmbedded  | `[dq, v]`   | `[a_j, F]`              | base acceleration eliminated
//!
//! Configuration increments are taken relative to the measured configuration,
//! so the initial state is always a zero increment plus the measured
//! velocity (or momentum).

pub mod gait;
pub mod stage;

use crate::dynamics::{self, ContactForceSet};
use crate::model::{difference, integrate, Configuration, KinematicTree, RobotState};
use crate::solver::{Iterate, SolverStats};
use gait::GaitSchedule;
use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("time grid needs N >= 2, dt0 > 0 and gamma >= 1 (got N={n}, dt0={dt0}, gamma={gamma})")]
    BadGrid { n: usize, dt0: f64, gamma: f64 },
    #[error("weights violate Q >= 0, R > 0: {0}")]
    BadWeights(String),
    #[error("no stance feet: cannot distribute weight")]
    NoStanceFeet,
    #[error("state dimensions do not match the model")]
    DimensionMismatch,
    #[error("unknown formulation '{0}'")]
    UnknownFormulation(String),
}

/// The six benchmarked dynamics formulations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formulation {
    WbInvDyn,
    WbFwdDyn,
    CentVelPath,
    CentVelEmbedded,
    CentAccPath,
    CentAccEmbedded,
}

impl Formulation {
    pub const ALL: [Formulation; 6] = [
        Formulation::WbInvDyn,
        Formulation::WbFwdDyn,
        Formulation::CentVelPath,
        Formulation::CentVelEmbedded,
        Formulation::CentAccPath,
        Formulation::CentAccEmbedded,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Formulation::WbInvDyn => "wb-inv-dyn",
            Formulation::WbFwdDyn => "wb-fwd-dyn",
            Formulation::CentVelPath => "cent-vel-path",
            Formulation::CentVelEmbedded => "cent-vel-embedded",
            Formulation::CentAccPath => "cent-acc-path",
            Formulation::CentAccEmbedded => "cent-acc-embedded",
        }
    }

    pub fn parse(s: &str) -> Result<Self, OcpError> {
        Formulation::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| OcpError::UnknownFormulation(s.to_string()))
    }
}

/// Node times with geometrically growing intervals `dt_k = gamma^k dt_0`.
#[derive(Clone, Debug)]
pub struct TimeGrid {
    pub steps: Vec<f64>,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn num_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// `N` nodes, `N - 1` intervals `dt_k = gamma^k dt_0`.
pub fn make_time_grid(n: usize, dt0: f64, gamma: f64) -> Result<TimeGrid, OcpError> {
    if n < 2 || dt0 <= 0.0 || gamma < 1.0 {
        return Err(OcpError::BadGrid { n, dt0, gamma });
    }
    let mut steps = Vec::with_capacity(n - 1);
    let mut times = Vec::with_capacity(n);
    times.push(0.0);
    for k in 0..n - 1 {
        let dt = gamma.powi(k as i32) * dt0;
        steps.push(dt);
        times.push(times[k] + dt);
    }
    Ok(TimeGrid { steps, times })
}

/// User command tracked by the MPC.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskCommand {
    /// World-frame base linear velocity target (m/s).
    pub base_velocity: [f64; 3],
    /// Base yaw rate target (rad/s).
    pub yaw_rate: f64,
    /// World-frame arm end-effector velocity target (m/s).
    pub ee_velocity: [f64; 3],
    /// World-frame arm end-effector force target (N).
    pub ee_force: [f64; 3],
}

impl Default for TaskCommand {
    fn default() -> Self {
        Self { base_velocity: [0.0; 3], yaw_rate: 0.0, ee_velocity: [0.0; 3], ee_force: [0.0; 3] }
    }
}

/// Diagonal tracking weights. Configuration weights apply to the tangent
/// error against the nominal pose, velocity weights to the generalized
/// velocity, and the input weights to the formulation's input slices.
/// Defaults are tuned in-repo on the bundled model: soft base penalties,
/// hard end-effector constraints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpWeights {
    pub base_position: [f64; 3],
    pub base_rotation: [f64; 3],
    pub leg_joint_position: f64,
    pub arm_joint_position: f64,
    pub base_linear_velocity: [f64; 3],
    pub base_angular_velocity: [f64; 3],
    pub joint_velocity: f64,
    /// Momentum tracking for the centroidal-velocity state.
    pub momentum_linear: f64,
    pub momentum_angular: f64,
    pub torque: f64,
    pub accel_base: f64,
    pub accel_joint: f64,
    pub force: f64,
}

impl Default for OcpWeights {
    fn default() -> Self {
        Self {
            base_position: [100.0, 100.0, 2000.0],
            base_rotation: [600.0, 600.0, 300.0],
            leg_joint_position: 6.0,
            arm_joint_position: 60.0,
            base_linear_velocity: [80.0, 120.0, 40.0],
            base_angular_velocity: [60.0, 40.0, 30.0],
            joint_velocity: 1.5,
            momentum_linear: 2.0,
            momentum_angular: 1.0,
            torque: 1e-5,
            accel_base: 5e-3,
            accel_joint: 1e-3,
            force: 2e-4,
        }
    }
}

impl OcpWeights {
    pub fn validate(&self) -> Result<(), OcpError> {
        let q_entries: Vec<f64> = self
            .base_position
            .iter()
            .chain(self.base_rotation.iter())
            .chain(self.base_linear_velocity.iter())
            .chain(self.base_angular_velocity.iter())
            .copied()
            .chain([
                self.leg_joint_position,
                self.arm_joint_position,
                self.joint_velocity,
                self.momentum_linear,
                self.momentum_angular,
            ])
            .collect();
        for v in q_entries {
            if v < 0.0 || !v.is_finite() {
                return Err(OcpError::BadWeights(format!("negative state weight {}", v)));
            }
        }
        for v in [self.torque, self.accel_base, self.accel_joint, self.force] {
            if v <= 0.0 || !v.is_finite() {
                return Err(OcpError::BadWeights(format!("non-positive input weight {}", v)));
            }
        }
        Ok(())
    }

    /// Configuration-error diagonal (length nv); arm joints are the trailing
    /// `n_arm` entries.
    pub fn config_diag(&self, nv: usize, n_arm: usize) -> DVector<f64> {
        let nj = nv - 6;
        DVector::from_fn(nv, |i, _| {
            if i < 3 {
                self.base_position[i]
            } else if i < 6 {
                self.base_rotation[i - 3]
            } else if i < 6 + nj - n_arm {
                self.leg_joint_position
            } else {
                self.arm_joint_position
            }
        })
    }

    /// Velocity-error diagonal (length nv). A small floor keeps the diagonal
    /// strictly positive where it doubles as an input weight.
    pub fn velocity_diag(&self, nv: usize, floor: f64) -> DVector<f64> {
        DVector::from_fn(nv, |i, _| {
            let w = if i < 3 {
                self.base_linear_velocity[i]
            } else if i < 6 {
                self.base_angular_velocity[i - 3]
            } else {
                self.joint_velocity
            };
            w.max(floor)
        })
    }

    pub fn momentum_diag(&self) -> Vector6<f64> {
        Vector6::new(
            self.momentum_linear,
            self.momentum_linear,
            self.momentum_linear,
            self.momentum_angular,
            self.momentum_angular,
            self.momentum_angular,
        )
    }
}

/// Input-vector slices of one stage.
#[derive(Clone, Debug)]
pub struct InputLayout {
    pub tau: Option<Range<usize>>,
    pub acc: Option<Range<usize>>,
    pub vel: Option<Range<usize>>,
    pub force: Range<usize>,
    pub dim: usize,
}

/// Last node index carrying torque decision variables and torque bounds.
pub const TORQUE_NODE_LIMIT: usize = 2;

pub fn input_layout(
    formulation: Formulation,
    k: usize,
    nv: usize,
    nj: usize,
    n_force: usize,
) -> InputLayout {
    let mut at = 0;
    let mut tau = None;
    let mut acc = None;
    let mut vel = None;
    match formulation {
        Formulation::WbInvDyn => {
            if k <= TORQUE_NODE_LIMIT {
                tau = Some(at..at + nj);
                at += nj;
            }
            acc = Some(at..at + nv);
            at += nv;
        }
        Formulation::WbFwdDyn => {
            tau = Some(at..at + nj);
            at += nj;
        }
        Formulation::CentVelPath => {
            vel = Some(at..at + nv);
            at += nv;
        }
        Formulation::CentVelEmbedded => {
            vel = Some(at..at + nj);
            at += nj;
        }
        Formulation::CentAccPath => {
            acc = Some(at..at + nv);
            at += nv;
        }
        Formulation::CentAccEmbedded => {
            acc = Some(at..at + nj);
            at += nj;
        }
    }
    let force = at..at + n_force;
    at += n_force;
    InputLayout { tau, acc, vel, force, dim: at }
}

/// Even vertical weight distribution over the stance feet; swing feet and
/// the arm get zero.
pub fn desired_force_distribution(
    tree: &KinematicTree,
    flags: &[bool; 4],
) -> Result<ContactForceSet, OcpError> {
    let n_stance = flags.iter().filter(|f| **f).count();
    if n_stance == 0 {
        return Err(OcpError::NoStanceFeet);
    }
    let fz = tree.total_mass() * tree.gravity / n_stance as f64;
    let mut forces = ContactForceSet::zeros(tree);
    for (i, in_stance) in flags.iter().enumerate() {
        if *in_stance {
            forces.0[i] = Vector3::new(0.0, 0.0, fz);
        }
    }
    Ok(forces)
}

/// A fully assembled stage-wise NLP.
#[derive(Clone)]
pub struct OcpProblem {
    pub formulation: Formulation,
    pub tree: Arc<KinematicTree>,
    pub grid: TimeGrid,
    pub weights: OcpWeights,
    pub command: TaskCommand,
    pub friction_coefficient: f64,
    /// Measured configuration: the reference of all increments.
    pub q_ref: Configuration,
    pub v_init: DVector<f64>,
    /// Per-node cost reference configurations (base reference advances with
    /// the commanded velocity and yaw rate).
    pub q_des: Vec<Configuration>,
    pub v_des: DVector<f64>,
    pub h_des: Vector6<f64>,
    /// Per-node stance flags and swing vertical velocity references.
    pub contact_flags: Vec<[bool; 4]>,
    pub swing_vz: Vec<[Option<f64>; 4]>,
    /// Swing feet one node ahead of touchdown: their horizontal velocity is
    /// pinned so the foot arrives at the pinning instant at rest (the node
    /// grid cannot place a node exactly at the touchdown time).
    pub pre_touchdown: Vec<[bool; 4]>,
    /// Per-node force reference (even weight distribution), flattened.
    pub force_des: Vec<DVector<f64>>,
    /// Absolute time of node 0 (gait phase origin).
    pub clock: f64,
}

/// Build the stage NLP for one formulation at the measured state.
///
/// The cost reference keeps the nominal posture; the horizontal base and yaw
/// reference starts from `base_reference` (the receding-horizon loop holds a
/// persistent one so position errors are actively corrected) or, when absent,
/// from the measured base.
#[allow(clippy::too_many_arguments)]
pub fn build_ocp(
    formulation: Formulation,
    tree: &Arc<KinematicTree>,
    grid: TimeGrid,
    gait: &GaitSchedule,
    command: &TaskCommand,
    weights: &OcpWeights,
    friction_coefficient: f64,
    nominal: &Configuration,
    state: &RobotState,
    clock: f64,
) -> Result<OcpProblem, OcpError> {
    build_ocp_with_reference(
        formulation,
        tree,
        grid,
        gait,
        command,
        weights,
        friction_coefficient,
        nominal,
        state,
        clock,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn build_ocp_with_reference(
    formulation: Formulation,
    tree: &Arc<KinematicTree>,
    grid: TimeGrid,
    gait: &GaitSchedule,
    command: &TaskCommand,
    weights: &OcpWeights,
    friction_coefficient: f64,
    nominal: &Configuration,
    state: &RobotState,
    clock: f64,
    base_reference: Option<([f64; 2], f64)>,
) -> Result<OcpProblem, OcpError> {
    weights.validate()?;
    if state.q.joints.len() != tree.n_joints() || state.v.len() != tree.nv() {
        return Err(OcpError::DimensionMismatch);
    }
    let n = grid.num_nodes();
    let mut contact_flags = Vec::with_capacity(n);
    let mut swing_vz = Vec::with_capacity(n);
    let mut force_des = Vec::with_capacity(n);
    for k in 0..n {
        let t = clock + grid.times[k];
        let flags = gait.contact_flags(t);
        let mut vz = [None; 4];
        for foot in 0..4 {
            if !flags[foot] {
                vz[foot] = gait::swing_reference(gait, foot, t, gait.step_height);
            }
        }
        let fd = desired_force_distribution(tree, &flags)?;
        contact_flags.push(flags);
        swing_vz.push(vz);
        force_des.push(fd.to_vector());
    }
    let mut pre_touchdown = vec![[false; 4]; n];
    for k in 0..n - 1 {
        for foot in 0..4 {
            pre_touchdown[k][foot] = !contact_flags[k][foot] && contact_flags[k + 1][foot];
        }
    }

    // Desired configurations: nominal posture; the base reference starts at
    // the supplied anchor (or the measured pose) and advances with the
    // command.
    let ([x0, y0], yaw0) = base_reference.unwrap_or_else(|| {
        let rot = state.q.base_quat.to_rotation_matrix();
        let yaw = rot[(1, 0)].atan2(rot[(0, 0)]);
        ([state.q.base_pos.x, state.q.base_pos.y], yaw)
    });
    let mut q_des = Vec::with_capacity(n);
    for k in 0..n {
        let t = grid.times[k];
        let mut qd = nominal.clone();
        qd.base_pos.x = x0 + command.base_velocity[0] * t;
        qd.base_pos.y = y0 + command.base_velocity[1] * t;
        qd.base_quat = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
            0.0,
            0.0,
            yaw0 + command.yaw_rate * t,
        ));
        q_des.push(qd);
    }

    let nv = tree.nv();
    let mut v_des = DVector::zeros(nv);
    for i in 0..3 {
        v_des[i] = command.base_velocity[i];
    }
    v_des[5] = command.yaw_rate;

    let mass = tree.total_mass();
    let mut h_des = Vector6::zeros();
    for i in 0..3 {
        h_des[i] = mass * command.base_velocity[i];
    }

    Ok(OcpProblem {
        formulation,
        tree: Arc::clone(tree),
        grid,
        weights: weights.clone(),
        command: command.clone(),
        friction_coefficient,
        q_ref: state.q.clone(),
        v_init: state.v.clone(),
        q_des,
        v_des,
        h_des,
        contact_flags,
        swing_vz,
        force_des,
        pre_touchdown,
        clock,
    })
}

impl OcpProblem {
    pub fn nv(&self) -> usize {
        self.tree.nv()
    }

    pub fn n_joints(&self) -> usize {
        self.tree.n_joints()
    }

    pub fn n_force(&self) -> usize {
        3 * self.tree.contact_frames.len()
    }

    pub fn state_dimension(&self) -> usize {
        match self.formulation {
            Formulation::CentVelPath | Formulation::CentVelEmbedded => 6 + self.nv(),
            _ => 2 * self.nv(),
        }
    }

    pub fn layout(&self, k: usize) -> InputLayout {
        input_layout(self.formulation, k, self.nv(), self.n_joints(), self.n_force())
    }

    /// Total decision-variable count: all node states plus all stage inputs.
    pub fn decision_variable_count(&self) -> usize {
        let n = self.grid.num_nodes();
        let mut total = n * self.state_dimension();
        for k in 0..n - 1 {
            total += self.layout(k).dim;
        }
        total
    }

    /// Configuration at a node given its state vector.
    pub fn node_configuration(&self, x: &DVector<f64>) -> Configuration {
        let dq = self.state_dq(x);
        integrate(&self.q_ref, &dq).expect("dimensions fixed at build time")
    }

    pub(crate) fn state_dq(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(self.dq_offset(), self.nv()).into_owned()
    }

    pub(crate) fn dq_offset(&self) -> usize {
        match self.formulation {
            Formulation::CentVelPath | Formulation::CentVelEmbedded => 6,
            _ => 0,
        }
    }

    /// Whether the generalized velocity lives in the state vector.
    pub(crate) fn velocity_in_state(&self) -> bool {
        !matches!(self.formulation, Formulation::CentVelPath | Formulation::CentVelEmbedded)
    }
}

/// Optimized trajectory with per-node quantities in physical coordinates.
#[derive(Clone, Debug)]
pub struct SolutionTrajectory {
    /// Absolute node times (clock + grid).
    pub times: Vec<f64>,
    pub configurations: Vec<Configuration>,
    pub velocities: Vec<DVector<f64>>,
    pub accelerations: Vec<DVector<f64>>,
    pub forces: Vec<ContactForceSet>,
    /// Joint feed-forward torques at nodes 0..=2.
    pub torques: Vec<DVector<f64>>,
    pub stats: SolverStats,
    /// Solve clock (time of node 0).
    pub stamp: f64,
    /// Raw solver iterate for warm starting.
    pub iterate: Iterate,
    /// True when the solver failed and this is a carried-over solution.
    pub stale: bool,
    /// Worst constraint residual over all nodes of the returned iterate:
    /// max of |equality rows| and inequality violation (negative slack side).
    pub node_residual_max: f64,
}

/// Worst constraint residual of an iterate across all nodes: equality rows
/// by absolute value, inequality rows by their violation.
pub fn node_residual_max(problem: &OcpProblem, iterate: &Iterate) -> f64 {
    use crate::solver::StageOcp;
    let n = problem.grid.num_nodes();
    let mut worst = 0.0_f64;
    for k in 0..n - 1 {
        let e = problem.stage_eq_value(k, &iterate.xs[k], &iterate.us[k]);
        worst = worst.max(e.abs().max());
        let g = problem.stage_ineq_value(k, &iterate.xs[k], &iterate.us[k]);
        for v in g.iter() {
            worst = worst.max((-v).max(0.0));
        }
    }
    for k in 1..n {
        let e = problem.state_eq_value(k, &iterate.xs[k]);
        if e.len() > 0 {
            worst = worst.max(e.abs().max());
        }
        let g = problem.state_ineq_value(k, &iterate.xs[k]);
        for v in g.iter() {
            worst = worst.max((-v).max(0.0));
        }
    }
    worst
}

/// Convert a solver iterate into physical per-node trajectories.
pub fn extract_solution(
    problem: &OcpProblem,
    iterate: Iterate,
    stats: SolverStats,
) -> SolutionTrajectory {
    let residual = node_residual_max(problem, &iterate);
    let n = problem.grid.num_nodes();
    let nv = problem.nv();
    let nj = problem.n_joints();
    let mut configurations = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut forces = Vec::with_capacity(n);

    for k in 0..n {
        let x = &iterate.xs[k];
        configurations.push(problem.node_configuration(x));
        if problem.velocity_in_state() {
            velocities.push(x.rows(nv, nv).into_owned());
        } else if k < n - 1 {
            let layout = problem.layout(k);
            let u = &iterate.us[k];
            let vel = layout.vel.clone().expect("centroidal velocity input");
            if vel.len() == nv {
                velocities.push(u.rows(vel.start, nv).into_owned());
            } else {
                // Embedded: recover the base velocity from the momentum state.
                let q = &configurations[k];
                let (a_mat, _) = dynamics::centroidal_momentum(&problem.tree, q, &DVector::zeros(nv));
                let h = x.rows(0, 6).into_owned();
                let v_j = u.rows(vel.start, nj).into_owned();
                let a_b = a_mat.view((0, 0), (6, 6)).into_owned();
                let a_j = a_mat.view((0, 6), (6, nj)).into_owned();
                let v_b = a_b.lu().solve(&(h - &a_j * &v_j)).unwrap_or_else(|| DVector::zeros(6));
                let mut v = DVector::zeros(nv);
                v.rows_mut(0, 6).copy_from(&v_b);
                v.rows_mut(6, nj).copy_from(&v_j);
                velocities.push(v);
            }
        } else {
            velocities.push(velocities[n - 2].clone());
        }
        if k < n - 1 {
            let layout = problem.layout(k);
            let f = iterate.us[k].rows(layout.force.start, layout.force.len()).into_owned();
            forces.push(ContactForceSet::from_vector(&f));
        } else {
            let last = forces[n - 2].clone();
            forces.push(last);
        }
    }

    let mut accelerations = Vec::with_capacity(n);
    for k in 0..n {
        if k < n - 1 {
            let layout = problem.layout(k);
            match (&layout.acc, problem.formulation) {
                (Some(acc), Formulation::CentAccEmbedded) => {
                    // The input holds joint accelerations; fill the base part
                    // from the state-velocity finite difference.
                    let dt = problem.grid.steps[k];
                    let mut a = (&velocities[k + 1] - &velocities[k]) / dt;
                    let aj = iterate.us[k].rows(acc.start, nj).into_owned();
                    a.rows_mut(6, nj).copy_from(&aj);
                    accelerations.push(a);
                }
                (Some(acc), _) => {
                    accelerations.push(iterate.us[k].rows(acc.start, acc.len()).into_owned());
                }
                (None, _) => {
                    let dt = problem.grid.steps[k];
                    accelerations.push((&velocities[k + 1] - &velocities[k]) / dt);
                }
            }
        } else {
            accelerations.push(DVector::zeros(nv));
        }
    }

    // Feed-forward torques for the first three nodes: decision variables
    // where present, inverse dynamics otherwise.
    let mut torques = Vec::with_capacity(3);
    for k in 0..3.min(n - 1) {
        let layout = problem.layout(k);
        let tau = match &layout.tau {
            Some(r) => iterate.us[k].rows(r.start, r.len()).into_owned(),
            None => {
                let gen = dynamics::rnea(
                    &problem.tree,
                    &configurations[k],
                    &velocities[k],
                    &accelerations[k],
                    &forces[k],
                );
                gen.rows(6, nj).into_owned()
            }
        };
        torques.push(tau);
    }

    SolutionTrajectory {
        times: problem.grid.times.iter().map(|t| problem.clock + t).collect(),
        configurations,
        velocities,
        accelerations,
        forces,
        torques,
        stats,
        stamp: problem.clock,
        iterate,
        stale: false,
        node_residual_max: residual,
    }
}

/// Warm-start iterate from a previous solution: primal values copied
/// node-by-node, contact-force guesses replaced by the even weight
/// distribution of each node's stance set, multipliers and slacks reset.
/// Returns `None` on layout mismatch (caller falls back to a cold start).
pub fn warm_start_from(problem: &OcpProblem, previous: &SolutionTrajectory) -> Option<Iterate> {
    let n = problem.grid.num_nodes();
    if previous.iterate.xs.len() != n || previous.iterate.us.len() != n - 1 {
        return None;
    }
    if previous.iterate.xs[0].len() != problem.state_dimension() {
        return None;
    }
    let mut xs = previous.iterate.xs.clone();
    let mut us = previous.iterate.us.clone();
    for (k, u) in us.iter_mut().enumerate() {
        let layout = problem.layout(k);
        if u.len() != layout.dim {
            return None;
        }
        u.rows_mut(layout.force.start, layout.force.len()).copy_from(&problem.force_des[k]);
    }
    // The increment reference moved to the new measured configuration; raw
    // increments are kept as-is (consecutive references are close).
    xs[0] = initial_state_vector(problem);
    Some(Iterate::from_primal(xs, us))
}

/// Warm start with horizon time alignment: each new node takes the previous
/// solution evaluated at the node's absolute time (states re-based onto the
/// new increment reference, inputs zero-order held). Contact-force guesses
/// are reinitialized only where the contact mode changed between the aligned
/// horizons: swing feet to zero, newly landed feet to their even share of
/// the weight; persisting stance feet keep the previous optimal force. This
/// keeps the guess consistent with the contact schedule across the
/// solve-period shift, which the raw node-by-node copy loses around
/// stance/swing switches.
pub fn warm_start_aligned(problem: &OcpProblem, previous: &SolutionTrajectory) -> Option<Iterate> {
    let n = problem.grid.num_nodes();
    if previous.iterate.xs.len() != n || previous.iterate.us.len() != n - 1 {
        return None;
    }
    if previous.iterate.xs[0].len() != problem.state_dimension() {
        return None;
    }
    let nv = problem.nv();
    let prev_t0 = previous.times[0];
    let prev_end = *previous.times.last().unwrap();
    let mut xs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n - 1);
    for k in 0..n {
        let t = (problem.clock + problem.grid.times[k]).clamp(prev_t0, prev_end);
        // Locate the previous segment containing t.
        let mut seg = previous.times.len() - 2;
        for i in 0..previous.times.len() - 1 {
            if t <= previous.times[i + 1] {
                seg = i;
                break;
            }
        }
        let local = t - previous.times[seg];
        let q_t = integrate(&previous.configurations[seg], &(&previous.velocities[seg] * local))
            .expect("dimensions match");
        let v_t = &previous.velocities[seg] + &previous.accelerations[seg] * local;
        let dq_new = difference(&problem.q_ref, &q_t).expect("dimensions match");

        let mut x = DVector::zeros(problem.state_dimension());
        match problem.formulation {
            Formulation::CentVelPath | Formulation::CentVelEmbedded => {
                let (_, h) = dynamics::centroidal_momentum(&problem.tree, &q_t, &v_t);
                x.rows_mut(0, 6).copy_from(&h);
                x.rows_mut(6, nv).copy_from(&dq_new);
            }
            _ => {
                x.rows_mut(0, nv).copy_from(&dq_new);
                x.rows_mut(nv, nv).copy_from(&v_t);
            }
        }
        xs.push(x);

        if k < n - 1 {
            let layout = problem.layout(k);
            if previous.iterate.us[seg.min(n - 2)].len() != layout.dim
                && previous.iterate.us[seg.min(n - 2)].len()
                    != input_layout(problem.formulation, seg.min(n - 2), nv, problem.n_joints(), problem.n_force()).dim
            {
                return None;
            }
            let src = &previous.iterate.us[seg.min(n - 2)];
            let src_layout = input_layout(
                problem.formulation,
                seg.min(n - 2),
                nv,
                problem.n_joints(),
                problem.n_force(),
            );
            let mut u = DVector::zeros(layout.dim);
            // Zero-order hold per input slice; torque slices may appear or
            // vanish across the torque-node boundary.
            if let (Some(dst), Some(srcr)) = (&layout.tau, &src_layout.tau) {
                for (d, s) in dst.clone().zip(srcr.clone()) {
                    u[d] = src[s];
                }
            }
            if let (Some(dst), Some(srcr)) = (&layout.acc, &src_layout.acc) {
                for (d, s) in dst.clone().zip(srcr.clone()) {
                    u[d] = src[s];
                }
            }
            if let (Some(dst), Some(srcr)) = (&layout.vel, &src_layout.vel) {
                for (d, s) in dst.clone().zip(srcr.clone()) {
                    u[d] = src[s];
                }
            }
            if layout.tau.is_some() && src_layout.tau.is_none() {
                // The previous horizon had no torque variables at the aligned
                // stage; reconstruct them by inverse dynamics.
                let a_t = &previous.accelerations[seg];
                let f_t = &previous.forces[seg];
                let gen = dynamics::rnea(&problem.tree, &q_t, &v_t, a_t, f_t);
                let dst = layout.tau.clone().unwrap();
                for (local, d) in dst.enumerate() {
                    u[d] = gen[6 + local];
                }
            }
            // Per-foot selective force reinitialization.
            let flags = &problem.contact_flags[k];
            let n_stance = flags.iter().filter(|f| **f).count().max(1);
            let even_share = problem.tree.total_mass() * problem.tree.gravity / n_stance as f64;
            for foot in 0..4 {
                let dst = layout.force.start + 3 * foot;
                let srcf = src_layout.force.start + 3 * foot;
                if !flags[foot] {
                    for i in 0..3 {
                        u[dst + i] = 0.0;
                    }
                } else {
                    let prev_fz = src[srcf + 2];
                    if prev_fz < 1.0 {
                        u[dst] = 0.0;
                        u[dst + 1] = 0.0;
                        u[dst + 2] = even_share;
                    } else {
                        for i in 0..3 {
                            u[dst + i] = src[srcf + i];
                        }
                    }
                }
            }
            // Arm force guess follows the command directly.
            for i in 0..3 {
                u[layout.force.start + 12 + i] = problem.command.ee_force[i];
            }
            us.push(u);
        }
    }
    xs[0] = initial_state_vector(problem);
    Some(Iterate::from_primal(xs, us))
}

/// Cold-start iterate: node 0 pinned at the measurement, later nodes at the
/// constant-configuration reference state (inside bounds and consistent with
/// the stance rows), inputs at their references. Concentrating the
/// measured-state mismatch into the first stage keeps a violent measurement
/// from polluting the whole horizon.
pub fn cold_start(problem: &OcpProblem) -> Iterate {
    let n = problem.grid.num_nodes();
    let x0 = initial_state_vector(problem);
    let nv = problem.nv();
    let mut x_ref = DVector::zeros(problem.state_dimension());
    match problem.formulation {
        Formulation::CentVelPath | Formulation::CentVelEmbedded => {
            for i in 0..6 {
                x_ref[i] = problem.h_des[i];
            }
        }
        _ => {
            x_ref.rows_mut(nv, nv).copy_from(&problem.v_des);
        }
    }
    let mut xs = vec![x_ref; n];
    xs[0] = x0;
    let mut us = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let layout = problem.layout(k);
        let mut u = DVector::zeros(layout.dim);
        u.rows_mut(layout.force.start, layout.force.len()).copy_from(&problem.force_des[k]);
        if let Some(vel) = &layout.vel {
            if vel.len() == problem.nv() {
                u.rows_mut(vel.start, vel.len()).copy_from(&problem.v_des);
            }
        }
        us.push(u);
    }
    Iterate::from_primal(xs, us)
}

pub(crate) fn initial_state_vector(problem: &OcpProblem) -> DVector<f64> {
    let nv = problem.nv();
    let mut x0 = DVector::zeros(problem.state_dimension());
    match problem.formulation {
        Formulation::CentVelPath | Formulation::CentVelEmbedded => {
            let (_, h) = dynamics::centroidal_momentum(&problem.tree, &problem.q_ref, &problem.v_init);
            x0.rows_mut(0, 6).copy_from(&h);
        }
        _ => {
            x0.rows_mut(nv, nv).copy_from(&problem.v_init);
        }
    }
    x0
}

/// Tangent-space configuration error used by the stage cost.
pub(crate) fn config_error(problem: &OcpProblem, k: usize, q: &Configuration) -> DVector<f64> {
    difference(&problem.q_des[k], q).expect("dimensions checked at build")
}
