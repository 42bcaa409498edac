//! Closed-loop physics harness.
//!
//! The default contact model pins stance feet with kinematic constraints
//! (Baumgarte-stabilized), solving the contact-constrained forward dynamics
//! for accelerations and contact forces together; a penalty-spring ground is
//! available as a robustness stressor. Integration is semi-implicit Euler
//! with a manifold configuration update. The harness drives planner,
//! controller, and simulator from one clock, emulating the solve delay.

use crate::dynamics::{self, ContactForceSet};
use crate::model::{integrate, Configuration, KinematicTree, RobotState};
use crate::ocp::gait::GaitSchedule;
use crate::ocp::TaskCommand;
use crate::runtime::{interpolate, pd_torque, MpcRuntime, MpcSettings, PdGains};
use crate::solver::ConvergenceStatus;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation diverged at t = {t}: {reason}")]
    Diverged { t: f64, reason: String },
    #[error("contact system singular (duplicated frames?)")]
    SingularContact,
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
    #[error("log shorter than the steady-state window")]
    LogTooShort,
}

/// Ground contact model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactMode {
    /// Feet pinned by kinematic constraints while flagged in stance.
    ScheduledConstraint,
    /// Spring-damper ground reacting to penetration, regardless of schedule.
    Penalty,
}

/// Solve-delay emulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DelayModel {
    None,
    /// Fixed delay in seconds between solve start and solution availability.
    Fixed(f64),
    /// Use the measured wall-clock solve time (not deterministic).
    Measured,
}

/// Baumgarte stabilization gains for the pinned-foot constraints.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BaumgarteGains {
    /// Position feedback (1/s^2).
    pub position: f64,
    /// Velocity feedback (1/s).
    pub velocity: f64,
}

impl Default for BaumgarteGains {
    fn default() -> Self {
        Self { position: 400.0, velocity: 120.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Integration step (s).
    pub dt: f64,
    pub contact_mode: ContactMode,
    pub baumgarte: BaumgarteGains,
    /// Penalty-ground stiffness/damping (used in penalty mode).
    pub ground_stiffness: f64,
    pub ground_damping: f64,
    pub ground_tangential_damping: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            contact_mode: ContactMode::ScheduledConstraint,
            baumgarte: BaumgarteGains::default(),
            ground_stiffness: 4e4,
            ground_damping: 1.5e3,
            ground_tangential_damping: 1.2e3,
        }
    }
}

/// Result of one integration step.
pub struct StepOutput {
    pub state: RobotState,
    /// Contact forces realized by the simulator (feet; arm slot carries any
    /// external end-effector force).
    pub forces: ContactForceSet,
    /// Stance feet whose normal force came out negative (adhesion demanded
    /// by the schedule); counted, not hidden.
    pub adhesion_events: usize,
}

/// One scheduled-constraint or penalty step.
///
/// `anchors` are per-foot pin positions used by the Baumgarte servo in
/// scheduled mode. `ee_force` is an external world-frame force applied at
/// the arm end-effector frame.
pub fn sim_step(
    tree: &KinematicTree,
    state: &RobotState,
    tau_motor: &DVector<f64>,
    contact_flags: &[bool; 4],
    anchors: &[Option<Vector3<f64>>; 4],
    ee_force: Option<Vector3<f64>>,
    config: &SimConfig,
) -> Result<StepOutput, SimError> {
    match config.contact_mode {
        ContactMode::ScheduledConstraint => {
            scheduled_step(tree, state, tau_motor, contact_flags, anchors, ee_force, config)
        }
        ContactMode::Penalty => penalty_step(tree, state, tau_motor, ee_force, config),
    }
}

fn scheduled_step(
    tree: &KinematicTree,
    state: &RobotState,
    tau_motor: &DVector<f64>,
    contact_flags: &[bool; 4],
    anchors: &[Option<Vector3<f64>>; 4],
    ee_force: Option<Vector3<f64>>,
    config: &SimConfig,
) -> Result<StepOutput, SimError> {
    let nv = tree.nv();
    let nj = tree.n_joints();
    let dt = config.dt;
    let q = &state.q;
    let v = &state.v;

    let m = dynamics::mass_matrix(tree, q);
    let b = dynamics::bias_forces(tree, q, v);
    let mut rhs_force = -b;
    for j in 0..nj {
        rhs_force[6 + j] += tau_motor[j];
    }
    let jacobians = dynamics::all_contact_jacobians(tree, q);
    if let Some(f_ee) = ee_force {
        rhs_force += jacobians[4].transpose() * f_ee;
    }

    let stance: Vec<usize> = (0..4).filter(|i| contact_flags[*i]).collect();
    let nc = 3 * stance.len();
    let positions = dynamics::contact_frame_positions(tree, q);
    let velocities = dynamics::contact_frame_velocities(tree, q, v);
    let bias_acc = dynamics::contact_frame_accelerations(tree, q, v, &DVector::zeros(nv));

    // KKT system [M -J'; J 0] [a; f] = [tau_ext - b; xdd_des - xi].
    let dim = nv + nc;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&m);
    rhs.rows_mut(0, nv).copy_from(&rhs_force);
    for (ci, &foot) in stance.iter().enumerate() {
        let row = nv + 3 * ci;
        let j = &jacobians[foot];
        kkt.view_mut((row, 0), (3, nv)).copy_from(j);
        kkt.view_mut((0, row), (nv, 3)).copy_from(&(-j.transpose()));
        let anchor = anchors[foot].unwrap_or(positions[foot]);
        let err = positions[foot] - anchor;
        let xdd_des =
            -config.baumgarte.position * err - config.baumgarte.velocity * velocities[foot];
        rhs.rows_mut(row, 3).copy_from(&(xdd_des - bias_acc[foot]));
    }
    let sol = kkt.lu().solve(&rhs).ok_or(SimError::SingularContact)?;
    let a = sol.rows(0, nv).into_owned();
    let mut forces = ContactForceSet::zeros(tree);
    let mut adhesion = 0;
    for (ci, &foot) in stance.iter().enumerate() {
        let f = Vector3::new(sol[nv + 3 * ci], sol[nv + 3 * ci + 1], sol[nv + 3 * ci + 2]);
        if f.z < 0.0 {
            adhesion += 1;
        }
        forces.0[foot] = f;
    }
    if let Some(f_ee) = ee_force {
        forces.0[4] = f_ee;
    }

    // Semi-implicit update with a midpoint configuration advance: exact for
    // constant-acceleration motion, which the free-fall oracle requires.
    let v_new = v + &a * dt;
    let v_mid = 0.5 * (v + &v_new);
    let q_new = integrate(q, &(&v_mid * dt)).expect("dimensions match");
    Ok(StepOutput {
        state: RobotState { q: q_new, v: v_new },
        forces,
        adhesion_events: adhesion,
    })
}

fn penalty_step(
    tree: &KinematicTree,
    state: &RobotState,
    tau_motor: &DVector<f64>,
    ee_force: Option<Vector3<f64>>,
    config: &SimConfig,
) -> Result<StepOutput, SimError> {
    let q = &state.q;
    let v = &state.v;
    let positions = dynamics::contact_frame_positions(tree, q);
    let velocities = dynamics::contact_frame_velocities(tree, q, v);
    let mut forces = ContactForceSet::zeros(tree);
    for foot in 0..4 {
        let z = positions[foot].z;
        if z < 0.0 {
            let fz = (-config.ground_stiffness * z - config.ground_damping * velocities[foot].z)
                .max(0.0);
            let mut ft = -config.ground_tangential_damping
                * Vector3::new(velocities[foot].x, velocities[foot].y, 0.0);
            // Coulomb cap with a nominal friction coefficient.
            let cap = 0.7 * fz;
            if ft.norm() > cap {
                ft *= cap / ft.norm();
            }
            forces.0[foot] = Vector3::new(ft.x, ft.y, fz);
        }
    }
    if let Some(f_ee) = ee_force {
        forces.0[4] = f_ee;
    }
    let a = dynamics::forward_dynamics(tree, q, v, tau_motor, &forces)
        .map_err(|_| SimError::SingularContact)?;
    let v_new = v + &a * config.dt;
    let v_mid = 0.5 * (v + &v_new);
    let q_new = integrate(q, &(&v_mid * config.dt)).expect("dimensions match");
    Ok(StepOutput {
        state: RobotState { q: q_new, v: v_new },
        forces,
        adhesion_events: 0,
    })
}

/// Increment the base linear velocity by a world-frame impulse.
pub fn apply_disturbance(state: &RobotState, impulse: Vector3<f64>) -> RobotState {
    let mut out = state.clone();
    out.v[0] += impulse.x;
    out.v[1] += impulse.y;
    out.v[2] += impulse.z;
    out
}

/// One logged sample of the closed loop.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub tau_motor: DVector<f64>,
    pub forces: DVector<f64>,
    pub flags: [bool; 4],
    pub command: TaskCommand,
    pub solver_iterations: usize,
    pub solve_time: f64,
    pub kkt_residual: f64,
    pub stale: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
    pub adhesion_events: usize,
    pub solve_times: Vec<f64>,
    pub solve_iterations: Vec<usize>,
    /// Per accepted solve: worst constraint residual at the solution nodes.
    pub solution_residuals: Vec<f64>,
    /// Per accepted solve: peak commanded torque magnitude at nodes 0..=2.
    pub solution_peak_torques: Vec<f64>,
}

/// Tracking and stability metrics over the steady window.
#[derive(Clone, Debug, Serialize)]
pub struct SimMetrics {
    /// |mean base horizontal velocity - command| (m/s).
    pub drift: f64,
    /// Net base horizontal displacement beyond the commanded motion (m).
    pub base_displacement: f64,
    /// Worst in-stance foot horizontal travel (m).
    pub slip_max: f64,
    /// RMS end-effector position error against the command-integrated
    /// reference (m).
    pub ee_rms: f64,
    /// Peak absolute joint torque (N m).
    pub peak_torque: f64,
    pub adhesion_events: usize,
    pub mean_solve_time: f64,
    pub mean_iterations: f64,
}

/// Time-tagged piecewise-constant command schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommandSchedule(pub Vec<(f64, TaskCommand)>);

impl CommandSchedule {
    pub fn constant(cmd: TaskCommand) -> Self {
        Self(vec![(0.0, cmd)])
    }

    pub fn at(&self, t: f64) -> TaskCommand {
        let mut best = self.0[0].1.clone();
        for (time, cmd) in &self.0 {
            if *time <= t + 1e-12 {
                best = cmd.clone();
            }
        }
        best
    }
}

/// Scheduled base-velocity impulse.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    pub impulse: [f64; 3],
}

/// Full closed-loop scenario description.
#[derive(Clone)]
pub struct Scenario {
    pub mpc: MpcSettings,
    pub gait: GaitSchedule,
    pub commands: CommandSchedule,
    pub duration: f64,
    pub sim: SimConfig,
    /// Controller (interpolation + PD) period, nominally 1/500 s.
    pub control_dt: f64,
    /// Planner period, nominally 1/80 s.
    pub mpc_period: f64,
    pub delay: DelayModel,
    pub gains: PdGains,
    pub disturbances: Vec<Disturbance>,
    /// Apply the commanded end-effector force to the robot as an external
    /// reaction (no object dynamics).
    pub apply_ee_reaction: bool,
    /// Optional first-order low-pass on measured joint velocities (Hz).
    pub velocity_filter_cutoff: Option<f64>,
    /// End-effector position servo gain (1/s): the commanded EE velocity is
    /// augmented by `gain * (target - measured)`, with the target integrated
    /// from the raw command. Zero disables the outer loop.
    pub ee_servo_gain: f64,
    pub initial_state: Option<RobotState>,
}

impl Scenario {
    pub fn new(mpc: MpcSettings, gait: GaitSchedule, commands: CommandSchedule, duration: f64) -> Self {
        Self {
            mpc,
            gait,
            commands,
            duration,
            sim: SimConfig::default(),
            control_dt: 0.002,
            mpc_period: 0.0125,
            delay: DelayModel::None,
            gains: PdGains::zero(),
            disturbances: Vec::new(),
            apply_ee_reaction: false,
            velocity_filter_cutoff: None,
            ee_servo_gain: 2.0,
            initial_state: None,
        }
    }
}

pub struct ClosedLoopResult {
    pub log: SimLog,
    pub metrics: SimMetrics,
    pub final_state: RobotState,
}

/// Run the lockstep closed loop: planner at `mpc_period` (solutions become
/// available after the modeled delay), controller at `control_dt`, simulator
/// at `sim.dt`. Deterministic for `DelayModel::None`/`Fixed`.
pub fn run_closed_loop(tree: &Arc<KinematicTree>, scenario: &Scenario) -> Result<ClosedLoopResult, SimError> {
    let nominal = crate::assets::nominal_configuration(tree);
    let mut state = scenario.initial_state.clone().unwrap_or(RobotState {
        q: nominal.clone(),
        v: DVector::zeros(tree.nv()),
    });
    let mut runtime = MpcRuntime::new(
        Arc::clone(tree),
        scenario.gait.clone(),
        nominal,
        scenario.mpc.clone(),
    );

    let dt = scenario.sim.dt;
    let steps = (scenario.duration / dt).round() as usize;
    let mut log = SimLog::default();
    let mut anchors: [Option<Vector3<f64>>; 4] = [None; 4];
    let mut prev_flags = [false; 4];
    let mut tau_motor = DVector::zeros(tree.n_joints());
    let mut active: Option<crate::ocp::SolutionTrajectory> = None;
    let mut pending: Option<(f64, crate::ocp::SolutionTrajectory)> = None;
    let mut next_mpc = 0.0_f64;
    let mut next_ctrl = 0.0_f64;
    let mut disturbances = scenario.disturbances.clone();
    disturbances.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    let mut dist_idx = 0;
    let mut filtered_vj = state.v.rows(6, tree.n_joints()).into_owned();
    let effort_limits = tree.effort_limits();
    let mut ee_target = dynamics::contact_frame_positions(tree, &state.q)[4];

    for step in 0..steps {
        let t = step as f64 * dt;

        while dist_idx < disturbances.len() && disturbances[dist_idx].time <= t + 0.5 * dt {
            let imp = disturbances[dist_idx].impulse;
            state = apply_disturbance(&state, Vector3::new(imp[0], imp[1], imp[2]));
            dist_idx += 1;
        }

        let flags = scenario.gait.contact_flags(t);
        for foot in 0..4 {
            if flags[foot] && !prev_flags[foot] || (flags[foot] && anchors[foot].is_none()) {
                let pos = dynamics::contact_frame_positions(tree, &state.q)[foot];
                anchors[foot] = Some(Vector3::new(pos.x, pos.y, 0.0));
            }
            if !flags[foot] {
                anchors[foot] = None;
            }
        }
        prev_flags = flags;

        let raw_command = scenario.commands.at(t);
        ee_target += dt * Vector3::new(
            raw_command.ee_velocity[0],
            raw_command.ee_velocity[1],
            raw_command.ee_velocity[2],
        );

        if t + 1e-9 >= next_mpc {
            let mut command = scenario.commands.at(t);
            if scenario.ee_servo_gain > 0.0 {
                // Position-feedback outer loop on the end-effector velocity
                // command, rate-limited around the measured end-effector
                // velocity so the hard tracking constraint stays feasible
                // under disturbances (a reference governor).
                let ee_now = dynamics::contact_frame_positions(tree, &state.q)[4];
                let ee_vel_now = dynamics::contact_frame_velocities(tree, &state.q, &state.v)[4];
                let err = ee_target - ee_now;
                for i in 0..3 {
                    let wanted = command.ee_velocity[i] + scenario.ee_servo_gain * err[i];
                    let reachable = (wanted - ee_vel_now[i]).clamp(-0.3, 0.3);
                    command.ee_velocity[i] = ee_vel_now[i] + reachable;
                }
            }
            // Measured state: ground truth, with an optional joint-velocity
            // low-pass emulating the hardware filter.
            let mut measured = state.clone();
            if let Some(cutoff) = scenario.velocity_filter_cutoff {
                let alpha = (2.0 * std::f64::consts::PI * cutoff * dt).min(1.0);
                let vj = state.v.rows(6, tree.n_joints()).into_owned();
                filtered_vj = &filtered_vj * (1.0 - alpha) + vj * alpha;
                measured.v.rows_mut(6, tree.n_joints()).copy_from(&filtered_vj);
            }
            if std::env::var("WBMPC_DUMP_STATE").map(|v| {
                let want: f64 = v.parse().unwrap_or(-1.0);
                (t - want).abs() < 6e-4
            }).unwrap_or(false) {
                let qv: Vec<String> = measured.q.to_vector().iter().map(|x| format!("{:.17e}", x)).collect();
                let vv: Vec<String> = measured.v.iter().map(|x| format!("{:.17e}", x)).collect();
                std::fs::write("/tmp/dump_state.txt", format!("{}\n{}\n{}\n", t, qv.join(","), vv.join(","))).ok();
            }
            let solution = runtime.mpc_step(&measured, &command, t)?;
            log.solve_times.push(solution.stats.solve_time);
            log.solve_iterations.push(solution.stats.iterations);
            if !solution.stale {
                log.solution_residuals.push(solution.node_residual_max);
                let peak = solution
                    .torques
                    .iter()
                    .flat_map(|t| t.iter())
                    .fold(0.0_f64, |m, v| m.max(v.abs()));
                log.solution_peak_torques.push(peak);
            }
            let avail = match scenario.delay {
                DelayModel::None => t,
                // The very first solve initializes the loop without delay.
                DelayModel::Fixed(d) if active.is_some() => t + d,
                DelayModel::Measured if active.is_some() => t + solution.stats.solve_time,
                _ => t,
            };
            pending = Some((avail, solution));
            next_mpc += scenario.mpc_period;
        }
        if let Some((avail, _)) = &pending {
            if t + 1e-9 >= *avail {
                active = pending.take().map(|(_, s)| s);
            }
        }

        if t + 1e-9 >= next_ctrl {
            if let Some(sol) = &active {
                let cmd = interpolate(sol, t.max(sol.times[0]))?;
                let jc = cmd.joint_command();
                let vj = state.v.rows(6, tree.n_joints()).into_owned();
                tau_motor = pd_torque(&jc, &state.q.joints, &vj, &scenario.gains, &effort_limits);
            }
            next_ctrl += scenario.control_dt;
        }

        let ee_force = if scenario.apply_ee_reaction {
            Some(Vector3::new(
                raw_command.ee_force[0],
                raw_command.ee_force[1],
                raw_command.ee_force[2],
            ))
        } else {
            None
        };
        let out = sim_step(tree, &state, &tau_motor, &flags, &anchors, ee_force, &scenario.sim)?;
        log.adhesion_events += out.adhesion_events;

        let (iters, solve_time, kkt, stale) = active
            .as_ref()
            .map(|s| {
                (
                    s.stats.iterations,
                    s.stats.solve_time,
                    s.stats.kkt_residual,
                    s.stale || s.stats.status == ConvergenceStatus::LineSearchFailure,
                )
            })
            .unwrap_or((0, 0.0, f64::NAN, false));
        log.rows.push(LogRow {
            t,
            q: state.q.to_vector(),
            v: state.v.clone(),
            tau_motor: tau_motor.clone(),
            forces: out.forces.to_vector(),
            flags,
            command: raw_command,
            solver_iterations: iters,
            solve_time,
            kkt_residual: kkt,
            stale,
        });

        state = out.state;
        if !state.v.iter().all(|x| x.is_finite()) || state.q.base_pos.z.abs() > 10.0 {
            return Err(SimError::Diverged {
                t,
                reason: format!(
                    "non-finite velocity or runaway base (z = {})",
                    state.q.base_pos.z
                ),
            });
        }
    }

    let metrics = match compute_metrics(tree, &scenario.gait, &log) {
        Ok(m) => m,
        // Short runs (debug scale) fall back to a window over the whole log.
        Err(SimError::LogTooShort) => {
            let mut short = GaitSchedule { period: scenario.duration / 4.0, ..scenario.gait.clone() };
            short.period = short.period.max(1e-3);
            compute_metrics(tree, &short, &log)?
        }
        Err(e) => return Err(e),
    };
    Ok(ClosedLoopResult { log, metrics, final_state: state })
}

/// Metrics over the steady window (the first two gait periods are skipped).
pub fn compute_metrics(
    tree: &KinematicTree,
    gait: &GaitSchedule,
    log: &SimLog,
) -> Result<SimMetrics, SimError> {
    let skip_t = 2.0 * gait.period;
    let rows: Vec<&LogRow> = log.rows.iter().filter(|r| r.t >= skip_t).collect();
    if rows.len() < 2 {
        return Err(SimError::LogTooShort);
    }

    // Drift: mean horizontal velocity against the mean command.
    let mut mean_v = Vector3::zeros();
    let mut mean_cmd = Vector3::zeros();
    for r in &rows {
        mean_v += Vector3::new(r.v[0], r.v[1], 0.0);
        mean_cmd += Vector3::new(r.command.base_velocity[0], r.command.base_velocity[1], 0.0);
    }
    mean_v /= rows.len() as f64;
    mean_cmd /= rows.len() as f64;
    let drift = (mean_v - mean_cmd).norm();

    // Net base displacement beyond the command integral.
    let q_first = Configuration::from_vector(&rows[0].q);
    let q_last = Configuration::from_vector(&rows.last().unwrap().q);
    let window = rows.last().unwrap().t - rows[0].t;
    let expected = mean_cmd * window;
    let moved = Vector3::new(
        q_last.base_pos.x - q_first.base_pos.x,
        q_last.base_pos.y - q_first.base_pos.y,
        0.0,
    );
    let base_displacement = (moved - expected).norm();

    // Slip: per-foot horizontal travel within each stance segment.
    let mut slip_max = 0.0_f64;
    let mut stance_start: [Option<Vector3<f64>>; 4] = [None; 4];
    for r in &rows {
        let q = Configuration::from_vector(&r.q);
        let feet = dynamics::contact_frame_positions(tree, &q);
        for foot in 0..4 {
            if r.flags[foot] {
                match stance_start[foot] {
                    None => stance_start[foot] = Some(feet[foot]),
                    Some(p0) => {
                        let d =
                            Vector3::new(feet[foot].x - p0.x, feet[foot].y - p0.y, 0.0).norm();
                        slip_max = slip_max.max(d);
                    }
                }
            } else {
                stance_start[foot] = None;
            }
        }
    }

    // End-effector RMS against the command-integrated reference.
    let q0 = Configuration::from_vector(&rows[0].q);
    let mut ee_ref = dynamics::contact_frame_positions(tree, &q0)[4];
    let mut sum_sq = 0.0;
    let mut prev_t = rows[0].t;
    for r in &rows {
        let dt = r.t - prev_t;
        prev_t = r.t;
        ee_ref += dt * Vector3::new(r.command.ee_velocity[0], r.command.ee_velocity[1], r.command.ee_velocity[2]);
        let q = Configuration::from_vector(&r.q);
        let ee = dynamics::contact_frame_positions(tree, &q)[4];
        sum_sq += (ee - ee_ref).norm_squared();
    }
    let ee_rms = (sum_sq / rows.len() as f64).sqrt();

    let peak_torque = rows
        .iter()
        .flat_map(|r| r.tau_motor.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));

    let mean_solve_time = if log.solve_times.is_empty() {
        0.0
    } else {
        log.solve_times.iter().sum::<f64>() / log.solve_times.len() as f64
    };
    let mean_iterations = if log.solve_iterations.is_empty() {
        0.0
    } else {
        log.solve_iterations.iter().sum::<usize>() as f64 / log.solve_iterations.len() as f64
    };

    Ok(SimMetrics {
        drift,
        base_displacement,
        slip_max,
        ee_rms,
        peak_torque,
        adhesion_events: log.adhesion_events,
        mean_solve_time,
        mean_iterations,
    })
}

/// Stable column schema of the closed-loop CSV log (schema version 1).
pub fn log_csv_header(tree: &KinematicTree) -> String {
    let mut cols = vec!["t".to_string()];
    for i in 0..tree.nq() {
        cols.push(format!("q_{}", i));
    }
    for i in 0..tree.nv() {
        cols.push(format!("v_{}", i));
    }
    for i in 0..tree.n_joints() {
        cols.push(format!("tau_{}", i));
    }
    for i in 0..3 * tree.contact_frames.len() {
        cols.push(format!("f_{}", i));
    }
    for name in ["fl", "fr", "rl", "rr"] {
        cols.push(format!("stance_{}", name));
    }
    cols.extend(
        [
            "cmd_vx", "cmd_vy", "cmd_vz", "cmd_yaw_rate", "cmd_ee_vx", "cmd_ee_vy", "cmd_ee_vz",
            "cmd_ee_fx", "cmd_ee_fy", "cmd_ee_fz", "solver_iterations", "solve_time", "kkt",
            "stale",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols.join(",")
}

pub fn log_row_csv(row: &LogRow) -> String {
    let mut out = Vec::new();
    out.push(format!("{:.6}", row.t));
    for v in row.q.iter() {
        out.push(format!("{:.9}", v));
    }
    for v in row.v.iter() {
        out.push(format!("{:.9}", v));
    }
    for v in row.tau_motor.iter() {
        out.push(format!("{:.6}", v));
    }
    for v in row.forces.iter() {
        out.push(format!("{:.6}", v));
    }
    for f in row.flags.iter() {
        out.push(if *f { "1".into() } else { "0".into() });
    }
    let c = &row.command;
    for v in [
        c.base_velocity[0],
        c.base_velocity[1],
        c.base_velocity[2],
        c.yaw_rate,
        c.ee_velocity[0],
        c.ee_velocity[1],
        c.ee_velocity[2],
        c.ee_force[0],
        c.ee_force[1],
        c.ee_force[2],
    ] {
        out.push(format!("{:.6}", v));
    }
    out.push(format!("{}", row.solver_iterations));
    out.push(format!("{:.6}", row.solve_time));
    out.push(format!("{:.3e}", row.kkt_residual));
    out.push(if row.stale { "1".into() } else { "0".into() });
    out.join(",")
}

pub fn write_log_csv(tree: &KinematicTree, log: &SimLog, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", log_csv_header(tree))?;
    for row in &log.rows {
        writeln!(f, "{}", log_row_csv(row))?;
    }
    Ok(())
}
