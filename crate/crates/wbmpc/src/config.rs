//! Scenario configuration: one TOML schema drives every CLI command.
//!
//! A scenario names the model file, the locked joints and contact frames,
//! the MPC formulation and grid, gait parameters, weights, a time-tagged
//! command list, and the simulation setup. Missing sections fall back to
//! the benchmark defaults, so a minimal file is just a few lines.

use crate::model::urdf::{self, ContactFrameSpec, ModelOptions};
use crate::model::{Configuration, KinematicTree, ModelError};
use crate::ocp::gait::GaitSchedule;
use crate::ocp::{Formulation, OcpWeights, TaskCommand};
use crate::runtime::{MpcSettings, PdGains};
use crate::sim::{CommandSchedule, ContactMode, DelayModel, Disturbance, Scenario, SimConfig};
use crate::solver::SolverSettings;
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub gait: GaitSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub commands: Vec<CommandEntry>,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceEntry>,
    #[serde(default)]
    pub check: Option<CheckSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// URDF-subset path, relative to the config file. Empty = bundled model.
    #[serde(default)]
    pub urdf: Option<String>,
    #[serde(default = "default_locked_joints")]
    pub locked_joints: Vec<String>,
    #[serde(default)]
    pub contact_frames: Vec<ContactFrameEntry>,
    /// Nominal base height override (m).
    #[serde(default)]
    pub base_height: Option<f64>,
}

fn default_locked_joints() -> Vec<String> {
    vec!["z1_joint5".into(), "z1_joint6".into()]
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            urdf: None,
            locked_joints: default_locked_joints(),
            contact_frames: Vec::new(),
            base_height: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactFrameEntry {
    pub name: String,
    pub parent: String,
    pub offset: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub formulation: String,
    pub nodes: usize,
    pub dt0: f64,
    pub gamma: f64,
    pub friction: f64,
    pub weights: OcpWeights,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        let s = MpcSettings::default_for(Formulation::WbInvDyn);
        Self {
            formulation: "wb-inv-dyn".into(),
            nodes: s.nodes,
            dt0: s.dt0,
            gamma: s.gamma,
            friction: s.friction,
            weights: OcpWeights::default(),
            max_iterations: SolverSettings::mpc().max_iterations,
            tolerance: SolverSettings::mpc().tolerance,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitSection {
    /// "trot" or "stand".
    pub pattern: String,
    pub period: f64,
    pub duty: [f64; 4],
    pub offsets: [f64; 4],
    pub step_height: f64,
}

impl Default for GaitSection {
    fn default() -> Self {
        Self {
            pattern: "trot".into(),
            period: 0.8,
            duty: [0.5; 4],
            offsets: [0.0, 0.5, 0.5, 0.0],
            step_height: 0.08,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub duration: f64,
    pub dt: f64,
    pub control_dt: f64,
    pub mpc_period: f64,
    /// "none", "measured", or a fixed delay in seconds.
    pub delay: toml::Value,
    /// "scheduled-constraint" or "penalty".
    pub contact_mode: String,
    pub kp: f64,
    pub kd: f64,
    pub apply_ee_reaction: bool,
    pub velocity_filter_cutoff: Option<f64>,
    pub baumgarte_position: f64,
    pub baumgarte_velocity: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            duration: 10.0,
            dt: sim.dt,
            control_dt: 0.002,
            mpc_period: 0.0125,
            delay: toml::Value::String("none".into()),
            contact_mode: "scheduled-constraint".into(),
            kp: 0.0,
            kd: 0.0,
            apply_ee_reaction: false,
            velocity_filter_cutoff: None,
            baumgarte_position: sim.baumgarte.position,
            baumgarte_velocity: sim.baumgarte.velocity,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandEntry {
    pub time: f64,
    pub base_velocity: [f64; 3],
    pub yaw_rate: f64,
    pub ee_velocity: [f64; 3],
    pub ee_force: [f64; 3],
}

impl Default for CommandEntry {
    fn default() -> Self {
        Self {
            time: 0.0,
            base_velocity: [0.0; 3],
            yaw_rate: 0.0,
            ee_velocity: [0.0; 3],
            ee_force: [0.0; 3],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEntry {
    pub time: f64,
    pub impulse: [f64; 3],
}

/// Metric thresholds applied with `--check`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub max_drift: Option<f64>,
    pub max_slip: Option<f64>,
    pub max_peak_torque: Option<f64>,
    pub max_ee_rms: Option<f64>,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self { max_drift: None, max_slip: None, max_peak_torque: None, max_ee_rms: None }
    }
}

/// Fully resolved scenario: model plus closed-loop configuration.
pub struct ResolvedScenario {
    pub tree: std::sync::Arc<KinematicTree>,
    pub nominal: Configuration,
    pub scenario: Scenario,
    pub check: Option<CheckSection>,
}

pub fn load_scenario_file(path: &Path) -> Result<ScenarioFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Build the kinematic tree described by the model section.
pub fn build_tree(section: &ModelSection, config_dir: &Path) -> Result<KinematicTree, ConfigError> {
    let xml = match &section.urdf {
        Some(rel) => {
            let path = config_dir.join(rel);
            std::fs::read_to_string(&path).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
        }
        None => crate::assets::B2Z1_URDF.to_string(),
    };
    let raw = urdf::parse_urdf(&xml)?;
    let frames = if section.contact_frames.is_empty() {
        crate::assets::benchmark_options().contact_frames
    } else {
        section
            .contact_frames
            .iter()
            .map(|f| ContactFrameSpec {
                name: f.name.clone(),
                parent_link: f.parent.clone(),
                offset: nalgebra::Vector3::new(f.offset[0], f.offset[1], f.offset[2]),
            })
            .collect()
    };
    let options = ModelOptions { locked_joints: section.locked_joints.clone(), contact_frames: frames };
    Ok(urdf::build_tree(raw, &options)?)
}

/// Resolve a scenario file into a runnable closed-loop description.
pub fn resolve(file: &ScenarioFile, config_dir: &Path) -> Result<ResolvedScenario, ConfigError> {
    let tree = std::sync::Arc::new(build_tree(&file.model, config_dir)?);
    let mut nominal = crate::assets::nominal_configuration(&tree);
    if let Some(h) = file.model.base_height {
        nominal.base_pos.z = h;
    }

    let formulation = Formulation::parse(&file.mpc.formulation).map_err(|e| ConfigError::Invalid {
        field: "mpc.formulation".into(),
        reason: e.to_string(),
    })?;
    let mut mpc = MpcSettings::default_for(formulation);
    mpc.nodes = file.mpc.nodes;
    mpc.dt0 = file.mpc.dt0;
    mpc.gamma = file.mpc.gamma;
    mpc.friction = file.mpc.friction;
    mpc.weights = file.mpc.weights.clone();
    mpc.solver.max_iterations = file.mpc.max_iterations;
    mpc.solver.tolerance = file.mpc.tolerance;

    let gait = match file.gait.pattern.as_str() {
        "stand" => GaitSchedule::stand(),
        "trot" => GaitSchedule {
            period: file.gait.period,
            duty: file.gait.duty,
            offsets: file.gait.offsets,
            step_height: file.gait.step_height,
        },
        other => {
            return Err(ConfigError::Invalid {
                field: "gait.pattern".into(),
                reason: format!("unknown pattern '{}' (trot|stand)", other),
            })
        }
    };
    for d in &file.gait.duty {
        if *d <= 0.0 || *d > 1.0 {
            return Err(ConfigError::Invalid {
                field: "gait.duty".into(),
                reason: format!("duty {} outside (0, 1]", d),
            });
        }
    }

    let commands = if file.commands.is_empty() {
        CommandSchedule::constant(TaskCommand::default())
    } else {
        CommandSchedule(
            file.commands
                .iter()
                .map(|c| {
                    (
                        c.time,
                        TaskCommand {
                            base_velocity: c.base_velocity,
                            yaw_rate: c.yaw_rate,
                            ee_velocity: c.ee_velocity,
                            ee_force: c.ee_force,
                        },
                    )
                })
                .collect(),
        )
    };

    let delay = parse_delay(&file.simulation.delay)?;
    let contact_mode = match file.simulation.contact_mode.as_str() {
        "scheduled-constraint" => ContactMode::ScheduledConstraint,
        "penalty" => ContactMode::Penalty,
        other => {
            return Err(ConfigError::Invalid {
                field: "simulation.contact_mode".into(),
                reason: format!("unknown mode '{}'", other),
            })
        }
    };

    let mut scenario = Scenario::new(mpc, gait, commands, file.simulation.duration);
    scenario.sim.dt = file.simulation.dt;
    scenario.sim.contact_mode = contact_mode;
    scenario.sim.baumgarte.position = file.simulation.baumgarte_position;
    scenario.sim.baumgarte.velocity = file.simulation.baumgarte_velocity;
    scenario.control_dt = file.simulation.control_dt;
    scenario.mpc_period = file.simulation.mpc_period;
    scenario.delay = delay;
    scenario.gains = PdGains { kp: file.simulation.kp, kd: file.simulation.kd };
    scenario.apply_ee_reaction = file.simulation.apply_ee_reaction;
    scenario.velocity_filter_cutoff = file.simulation.velocity_filter_cutoff;
    scenario.disturbances = file
        .disturbances
        .iter()
        .map(|d| Disturbance { time: d.time, impulse: d.impulse })
        .collect();

    Ok(ResolvedScenario { tree, nominal, scenario, check: file.check.clone() })
}

fn parse_delay(value: &toml::Value) -> Result<DelayModel, ConfigError> {
    match value {
        toml::Value::String(s) if s == "none" => Ok(DelayModel::None),
        toml::Value::String(s) if s == "measured" => Ok(DelayModel::Measured),
        toml::Value::Float(f) => Ok(DelayModel::Fixed(*f)),
        toml::Value::Integer(i) => Ok(DelayModel::Fixed(*i as f64)),
        other => Err(ConfigError::Invalid {
            field: "simulation.delay".into(),
            reason: format!("expected \"none\", \"measured\", or seconds; got {}", other),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let file: ScenarioFile = toml::from_str("").unwrap();
        let resolved = resolve(&file, Path::new(".")).unwrap();
        assert_eq!(resolved.tree.nv(), 22);
        assert_eq!(resolved.scenario.mpc.formulation, Formulation::WbInvDyn);
        assert_eq!(resolved.scenario.mpc.nodes, 15);
    }

    #[test]
    fn unknown_field_is_rejected_with_name() {
        let err = toml::from_str::<ScenarioFile>("[mpc]\nnodez = 3\n").unwrap_err();
        assert!(err.to_string().contains("nodez"), "error names the field: {}", err);
    }

    #[test]
    fn bad_formulation_is_reported() {
        let file: ScenarioFile = toml::from_str("[mpc]\nformulation = \"magic\"\n").unwrap();
        let err = match resolve(&file, Path::new(".")) {
            Err(e) => e,
            Ok(_) => panic!("bad formulation accepted"),
        };
        assert!(err.to_string().contains("formulation"));
    }

    #[test]
    fn delay_variants_parse() {
        let f: ScenarioFile = toml::from_str("[simulation]\ndelay = 0.0125\n").unwrap();
        let r = resolve(&f, Path::new(".")).unwrap();
        assert_eq!(r.scenario.delay, DelayModel::Fixed(0.0125));
        let f: ScenarioFile = toml::from_str("[simulation]\ndelay = \"measured\"\n").unwrap();
        let r = resolve(&f, Path::new(".")).unwrap();
        assert_eq!(r.scenario.delay, DelayModel::Measured);
    }

    #[test]
    fn command_schedule_resolves_in_order() {
        let f: ScenarioFile = toml::from_str(
            "[[commands]]\ntime = 0.0\nbase_velocity = [0.1, 0.0, 0.0]\n\n[[commands]]\ntime = 2.0\nbase_velocity = [0.3, 0.0, 0.0]\n",
        )
        .unwrap();
        let r = resolve(&f, Path::new(".")).unwrap();
        assert_eq!(r.scenario.commands.at(1.0).base_velocity[0], 0.1);
        assert_eq!(r.scenario.commands.at(2.5).base_velocity[0], 0.3);
    }
}
