//! Receding-horizon MPC runtime: assemble the OCP at the measured state,
//! solve with warm start, and turn solutions into joint commands through
//! linear interpolation and a joint-level PD law.
//!
//! The planner and the controller communicate through a single-slot
//! last-write-wins buffer; in lockstep simulation both run on one thread.

use crate::model::{integrate, Configuration, KinematicTree, RobotState};
use crate::ocp::gait::GaitSchedule;
use crate::ocp::{
    build_ocp_with_reference, cold_start, extract_solution, make_time_grid, warm_start_aligned,
    Formulation, OcpError, OcpWeights, SolutionTrajectory, TaskCommand,
};
use crate::solver::{solve, SolverSettings};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("interpolation time {t} precedes the solution start {t0}")]
    TimeBeforeSolution { t: f64, t0: f64 },
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("solver failed and no previous solution exists: {0}")]
    NoSolution(String),
}

/// Joint-space PD gains.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl PdGains {
    pub fn zero() -> Self {
        Self { kp: 0.0, kd: 0.0 }
    }
}

/// Per-joint command produced by the interpolator.
#[derive(Clone, Debug)]
pub struct JointCommand {
    pub tau_ff: DVector<f64>,
    pub q_des: DVector<f64>,
    pub v_des: DVector<f64>,
}

/// Full interpolated command (base parts included for logging).
#[derive(Clone, Debug)]
pub struct InterpolatedCommand {
    pub tau_ff: DVector<f64>,
    pub q_des: Configuration,
    pub v_des: DVector<f64>,
    /// Set when `t` ran past node 2 and values are held.
    pub beyond_horizon: bool,
}

impl InterpolatedCommand {
    pub fn joint_command(&self) -> JointCommand {
        let nj = self.q_des.joints.len();
        JointCommand {
            tau_ff: self.tau_ff.clone(),
            q_des: self.q_des.joints.clone(),
            v_des: self.v_des.rows(6, nj).into_owned(),
        }
    }
}

/// Runtime configuration for the receding-horizon loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcSettings {
    pub formulation: Formulation,
    pub nodes: usize,
    pub dt0: f64,
    pub gamma: f64,
    pub friction: f64,
    pub weights: OcpWeights,
    /// Per-step solver settings (bounded iteration cap).
    pub solver: SolverSettings,
    /// Solve the very first problem to full tolerance before the loop.
    pub full_first_solve: bool,
    /// Reject solutions whose KKT residual exceeds this and keep the last
    /// good one instead (flagged stale).
    pub reject_kkt_above: f64,
}

impl MpcSettings {
    pub fn default_for(formulation: Formulation) -> Self {
        Self {
            formulation,
            nodes: 15,
            dt0: 0.01,
            gamma: 10f64.powf(1.0 / 13.0),
            friction: 0.7,
            weights: OcpWeights::default(),
            solver: SolverSettings::mpc(),
            full_first_solve: true,
            reject_kkt_above: 0.5,
        }
    }
}

/// Planner state: owns the gait, weights, and the previous solution used for
/// warm starting.
pub struct MpcRuntime {
    pub tree: Arc<KinematicTree>,
    pub gait: GaitSchedule,
    pub nominal: Configuration,
    pub settings: MpcSettings,
    previous: Option<SolutionTrajectory>,
    solve_count: usize,
    consecutive_rejections: usize,
    /// Persistent world-frame base reference (x, y, yaw) advanced by the
    /// command between solves; anchors the position cost.
    base_reference: Option<([f64; 2], f64)>,
    last_clock: f64,
}

impl MpcRuntime {
    pub fn new(
        tree: Arc<KinematicTree>,
        gait: GaitSchedule,
        nominal: Configuration,
        settings: MpcSettings,
    ) -> Self {
        Self {
            tree,
            gait,
            nominal,
            settings,
            previous: None,
            solve_count: 0,
            consecutive_rejections: 0,
            base_reference: None,
            last_clock: 0.0,
        }
    }

    pub fn previous_solution(&self) -> Option<&SolutionTrajectory> {
        self.previous.as_ref()
    }

    /// Reset the warm-start memory (forces a cold start on the next step).
    pub fn reset(&mut self) {
        self.previous = None;
        self.solve_count = 0;
        self.consecutive_rejections = 0;
        self.base_reference = None;
    }

    /// One receding-horizon step: build the OCP at the measured state, solve
    /// warm-started from the previous solution, and publish the result.
    /// On an unrecoverable solver error the previous solution is returned
    /// with its `stale` flag set so the controller keeps a valid command.
    pub fn mpc_step(
        &mut self,
        state: &RobotState,
        command: &TaskCommand,
        clock: f64,
    ) -> Result<SolutionTrajectory, RuntimeError> {
        let grid = make_time_grid(self.settings.nodes, self.settings.dt0, self.settings.gamma)?;
        // Advance the persistent base reference with the command.
        let reference = match &mut self.base_reference {
            Some(([x, y], yaw)) => {
                let dt = (clock - self.last_clock).max(0.0);
                *x += command.base_velocity[0] * dt;
                *y += command.base_velocity[1] * dt;
                *yaw += command.yaw_rate * dt;
                ([*x, *y], *yaw)
            }
            None => {
                let rot = state.q.base_quat.to_rotation_matrix();
                let yaw = rot[(1, 0)].atan2(rot[(0, 0)]);
                let anchor = ([state.q.base_pos.x, state.q.base_pos.y], yaw);
                self.base_reference = Some(anchor);
                anchor
            }
        };
        self.last_clock = clock;
        let problem = build_ocp_with_reference(
            self.settings.formulation,
            &self.tree,
            grid,
            &self.gait,
            command,
            &self.settings.weights,
            self.settings.friction,
            &self.nominal,
            state,
            clock,
            Some(reference),
        )?;

        let warm = self
            .previous
            .as_ref()
            .and_then(|prev| warm_start_aligned(&problem, prev))
            .unwrap_or_else(|| cold_start(&problem));

        let mut settings = self.settings.solver.clone();
        if self.solve_count == 0 && self.settings.full_first_solve {
            settings.max_iterations = settings.max_iterations.max(60);
            settings.tolerance = settings.tolerance.min(1e-6);
        }
        match solve(&problem, Some(&warm), &settings) {
            Ok((iterate, stats)) => {
                self.solve_count += 1;
                let (iterate, stats) = if stats.kkt_residual > self.settings.reject_kkt_above {
                    // The warm start led nowhere (typically a large state
                    // jump); retry once from a cold start before giving up.
                    let cold = cold_start(&problem);
                    match solve(&problem, Some(&cold), &settings) {
                        Ok((it2, st2)) if st2.kkt_residual < stats.kkt_residual => (it2, st2),
                        _ => (iterate, stats),
                    }
                } else {
                    (iterate, stats)
                };
                if stats.kkt_residual > self.settings.reject_kkt_above
                    && self.consecutive_rejections < 3
                {
                    // Unusable iterate: keep commanding from the last good
                    // solution rather than feeding junk to the controller.
                    // A run of rejections means the carried solution has gone
                    // stale too; then the new iterate is the lesser evil.
                    if let Some(prev) = &self.previous {
                        self.consecutive_rejections += 1;
                        let mut carried = prev.clone();
                        carried.stale = true;
                        return Ok(carried);
                    }
                }
                self.consecutive_rejections = 0;
                let solution = extract_solution(&problem, iterate, stats);
                self.previous = Some(solution.clone());
                Ok(solution)
            }
            Err(e) => match &self.previous {
                Some(prev) => {
                    let mut carried = prev.clone();
                    carried.stale = true;
                    Ok(carried)
                }
                None => Err(RuntimeError::NoSolution(e.to_string())),
            },
        }
    }
}

/// Linear interpolation of the solution at time `t`:
/// within `[t_0, t_1]` the node-0 values are advanced; if the solution is
/// stale past `t_1` the same rule runs between nodes 1 and 2; past `t_2`
/// the node-2 values are held and flagged.
pub fn interpolate(solution: &SolutionTrajectory, t: f64) -> Result<InterpolatedCommand, RuntimeError> {
    let t0 = solution.times[0];
    if t < t0 - 1e-12 {
        return Err(RuntimeError::TimeBeforeSolution { t, t0 });
    }
    let nj = solution.torques[0].len();
    let seg = if t <= solution.times[1] {
        0
    } else if t <= solution.times[2] {
        1
    } else {
        2
    };
    if seg == 2 {
        // Hold node-2 values.
        return Ok(InterpolatedCommand {
            tau_ff: solution.torques[2].clone(),
            q_des: solution.configurations[2].clone(),
            v_des: solution.velocities[2].clone(),
            beyond_horizon: true,
        });
    }
    let dt = solution.times[seg + 1] - solution.times[seg];
    let local = (t - solution.times[seg]).max(0.0);
    let ratio = local / dt;
    let tau0 = &solution.torques[seg];
    let tau1 = &solution.torques[seg + 1];
    let mut tau_ff = DVector::zeros(nj);
    for i in 0..nj {
        tau_ff[i] = tau0[i] + (tau1[i] - tau0[i]) * ratio;
    }
    let v0 = &solution.velocities[seg];
    let a0 = &solution.accelerations[seg];
    let q_des = integrate(&solution.configurations[seg], &(v0 * local)).expect("dimensions match");
    let v_des = v0 + a0 * local;
    Ok(InterpolatedCommand { tau_ff, q_des, v_des, beyond_horizon: false })
}

/// Joint-level PD law with a final saturation at the effort limits.
pub fn pd_torque(
    cmd: &JointCommand,
    q_j: &DVector<f64>,
    v_j: &DVector<f64>,
    gains: &PdGains,
    effort_limits: &DVector<f64>,
) -> DVector<f64> {
    let nj = cmd.tau_ff.len();
    DVector::from_fn(nj, |i, _| {
        let tau = cmd.tau_ff[i] + gains.kp * (cmd.q_des[i] - q_j[i]) + gains.kd * (cmd.v_des[i] - v_j[i]);
        tau.clamp(-effort_limits[i], effort_limits[i])
    })
}

/// Per-foot contact flags plus swing progress at time `t`.
pub fn gait_phase(gait: &GaitSchedule, t: f64) -> ([bool; 4], [Option<f64>; 4]) {
    let flags = gait.contact_flags(t);
    let mut phases = [None; 4];
    for foot in 0..4 {
        phases[foot] = gait.swing_phase(foot, t);
    }
    (flags, phases)
}

/// Single-slot last-write-wins handoff between planner and controller.
/// The reader always sees the newest complete solution.
#[derive(Default)]
pub struct SolutionBuffer {
    slot: Mutex<Option<Arc<SolutionTrajectory>>>,
}

impl SolutionBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, solution: SolutionTrajectory) {
        *self.slot.lock().unwrap() = Some(Arc::new(solution));
    }

    pub fn latest(&self) -> Option<Arc<SolutionTrajectory>> {
        self.slot.lock().unwrap().clone()
    }
}
