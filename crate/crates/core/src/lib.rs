//! Exponential control barrier function safety filter for serial manipulators.
//!
//! The numerical core (`robot`, `control`, `qp`, `cbf`, `sim`) is generic over [`Real`]
//! (`f32` or `f64`). Search, scoring and the gain predictor work in `f64`.

// `!(x > 0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbf;
pub mod config;
pub mod control;
pub mod predictor;
pub mod qp;
pub mod robot;
pub mod scalar;
pub mod score;
pub mod search;
pub mod sim;

pub use cbf::{CbfDiagnostics, CbfParams, ClearanceSpec, FilterError, Obstacle};
pub use config::{default_scenario, ConfigError, ScenarioFile};
pub use control::{CtcGains, TrajectorySample, TrajectorySpec};
pub use predictor::{MlpFile, MlpModel, Prediction, Sample, TrainConfig};
pub use qp::{ActiveSetSolver, QpError, QpProblem, QpSolution, QpStatus};
pub use robot::{EeKinematics, JointState, LinkSpec, ModelError, RobotModel};
pub use scalar::Real;
pub use score::{RunRecord, ScoreBoard};
pub use search::{GridSpec, GuidedConfig, GuidedOutcome, Setting};
pub use sim::{Fault, LogRow, RunResult, Scenario, SimError};

pub type RobotModelF64 = RobotModel<f64>;
pub type RobotModelF32 = RobotModel<f32>;
pub type JointStateF64 = JointState<f64>;
pub type JointStateF32 = JointState<f32>;
pub type QpProblemF64 = QpProblem<f64>;
pub type QpProblemF32 = QpProblem<f32>;
pub type ScenarioF64 = Scenario<f64>;
pub type ScenarioF32 = Scenario<f32>;
pub type RunResultF64 = RunResult<f64>;
pub type MlpModelF64 = MlpModel<f64>;
