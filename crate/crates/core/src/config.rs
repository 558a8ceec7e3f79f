//! JSON scenario files shared by every driver; search configs extend them with extra blocks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{CbfParams, ClearanceSpec, Obstacle};
use crate::control::{CtcGains, TrajectorySpec};
use crate::qp::ActiveSetSolver;
use crate::robot::{self, JointState, ModelError, RobotModel, RobotModelFile};
use crate::search::{GridSpec, GuidedConfig};
use crate::sim::{EffortMetric, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub sweep_joint: usize,
    pub theta_start: f64,
    pub theta_end: f64,
    pub duration: f64,
    pub home_posture: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleFile {
    pub radius: f64,
    /// Explicit centre; when absent the obstacle sits on the nominal path at `placement_time`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
    /// Fraction of the sweep duration used for automatic placement.
    #[serde(default = "half")]
    pub placement_fraction: f64,
    #[serde(default)]
    pub offset: [f64; 3],
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearanceFile {
    pub r_ee: f64,
    pub r_pad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfFile {
    pub kappa1: f64,
    pub kappa2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dq: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpFile {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpFile {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EffortFile {
    #[default]
    TotalTorque,
    FilterTorque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub k: usize,
}

impl Default for DatasetFile {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    /// Path to a robot model file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot_file: Option<String>,
    /// Inline robot model; takes precedence over `robot_file`. Both absent: bundled UR10-like arm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot: Option<RobotModelFile>,
    pub trajectory: TrajectoryFile,
    /// `null` disables the safety filter.
    pub obstacle: Option<ObstacleFile>,
    pub clearance: ClearanceFile,
    pub cbf: CbfFile,
    pub gains: GainsFile,
    #[serde(default)]
    pub wrist_lock: bool,
    pub dt: f64,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<StateFile>,
    #[serde(default = "default_end_tol")]
    pub end_tol: f64,
    #[serde(default)]
    pub effort_metric: EffortFile,
    #[serde(default)]
    pub qp: QpFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guided: Option<GuidedConfig>,
    #[serde(default)]
    pub dataset: DatasetFile,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

fn default_end_tol() -> f64 {
    0.01
}

/// Default experiment: UR10-like arm sweeping its base joint past an obstacle.
pub const DEFAULT_SCENARIO_JSON: &str = include_str!("../data/default_scenario.json");

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut file = Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        file.base_dir = path.parent().map(Path::to_path_buf);
        Ok(file)
    }

    pub fn default_scenario() -> Self {
        Self::from_json(DEFAULT_SCENARIO_JSON).expect("bundled scenario parses")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn robot_model(&self) -> Result<RobotModel<f64>, ConfigError> {
        if let Some(inline) = &self.robot {
            return Ok(inline.to_model()?);
        }
        match &self.robot_file {
            None => Ok(robot::ur10()),
            Some(rel) => {
                let path = match &self.base_dir {
                    Some(dir) => dir.join(rel),
                    None => PathBuf::from(rel),
                };
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                Ok(RobotModelFile::from_json(&text)?.to_model()?)
            }
        }
    }

    pub fn to_scenario(&self) -> Result<Scenario<f64>, ConfigError> {
        let robot = Arc::new(self.robot_model()?);
        let n = robot.n_joints();
        let tr = &self.trajectory;
        if tr.home_posture.len() != n {
            return Err(ConfigError::Invalid(format!(
                "home_posture has {} entries, robot has {n} joints",
                tr.home_posture.len()
            )));
        }
        let trajectory = TrajectorySpec {
            sweep_joint: tr.sweep_joint,
            theta_start: tr.theta_start,
            theta_end: tr.theta_end,
            duration: tr.duration,
            home_posture: DVector::from_vec(tr.home_posture.clone()),
        };
        if !trajectory.is_valid() {
            return Err(ConfigError::Invalid("trajectory block is invalid".into()));
        }
        let clearance = ClearanceSpec::new(self.clearance.r_ee, self.clearance.r_pad)
            .ok_or_else(|| ConfigError::Invalid("clearance radii must be >= 0".into()))?;
        let cbf = CbfParams::new(self.cbf.kappa1, self.cbf.kappa2)
            .ok_or_else(|| ConfigError::Invalid("CBF gains must be positive".into()))?;
        let gains = CtcGains::new(self.gains.kp, self.gains.kd)
            .ok_or_else(|| ConfigError::Invalid("controller gains must be positive".into()))?;
        let obstacle = match &self.obstacle {
            None => None,
            Some(ob) => {
                let center = match ob.center {
                    Some(c) => Vector3::from(c),
                    None => {
                        let t = trajectory.duration * ob.placement_fraction;
                        robot.forward_kinematics(&trajectory.sample(t).q_d)?
                    }
                } + Vector3::from(ob.offset);
                Some(Obstacle::new(center, ob.radius).ok_or_else(|| {
                    ConfigError::Invalid("obstacle radius must be positive".into())
                })?)
            }
        };
        let initial_state = match &self.initial_state {
            None => JointState::at_rest(trajectory.sample(0.0).q_d),
            Some(s) => {
                let dq = s.dq.clone().unwrap_or_else(|| vec![0.0; s.q.len()]);
                JointState::new(DVector::from_vec(s.q.clone()), DVector::from_vec(dq))
            }
        };
        Ok(Scenario {
            robot,
            trajectory,
            obstacle,
            clearance,
            cbf,
            gains,
            wrist_lock: self.wrist_lock,
            dt: self.dt,
            duration: self.duration,
            initial_state,
            end_tol: self.end_tol,
            effort: match self.effort_metric {
                EffortFile::TotalTorque => EffortMetric::TotalTorque,
                EffortFile::FilterTorque => EffortMetric::FilterTorque,
            },
            solver: ActiveSetSolver {
                tol: self.qp.tol,
                max_iter: self.qp.max_iter,
            },
        })
    }
}

/// Default scenario built from the bundled configuration.
pub fn default_scenario() -> Scenario<f64> {
    ScenarioFile::default_scenario()
        .to_scenario()
        .expect("bundled scenario is valid")
}
