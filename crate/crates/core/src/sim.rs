//! Closed-loop simulation of one scenario, trajectory logging and run metrics.

use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use thiserror::Error;

use crate::cbf::{
    constraint_from_terms, safety_h, solve_filter_qp, CbfParams, ClearanceSpec, FilterError,
    Obstacle,
};
use crate::control::{ctc_from_terms, CtcGains, TrajectorySpec};
use crate::qp::ActiveSetSolver;
use crate::robot::{JointState, ModelError, RobotModel};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unsafe initial state: h(x0) = {h} must be positive")]
    UnsafeInitialState { h: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which torque the control-effort metric integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EffortMetric {
    /// `∫ ‖τ_safe‖ dt`
    #[default]
    TotalTorque,
    /// `∫ ‖τ_qp‖ dt`
    FilterTorque,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T: Real> {
    pub robot: Arc<RobotModel<T>>,
    pub trajectory: TrajectorySpec<T>,
    /// `None` runs the nominal controller without a safety filter.
    pub obstacle: Option<Obstacle<T>>,
    pub clearance: ClearanceSpec<T>,
    pub cbf: CbfParams<T>,
    pub gains: CtcGains<T>,
    pub wrist_lock: bool,
    pub dt: T,
    pub duration: T,
    pub initial_state: JointState<T>,
    /// Terminal Cartesian tolerance for a good run, metres.
    pub end_tol: T,
    pub effort: EffortMetric,
    pub solver: ActiveSetSolver<T>,
}

impl<T: Real> Scenario<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.robot.n_joints();
        if !(self.dt > T::zero()) {
            return Err(SimError::Invalid("dt must be positive".into()));
        }
        if !self.trajectory.is_valid() || self.trajectory.home_posture.len() != n {
            return Err(SimError::Invalid(
                "trajectory does not fit the robot".into(),
            ));
        }
        if !(self.duration >= self.trajectory.duration) {
            return Err(SimError::Invalid(
                "duration must cover the trajectory duration".into(),
            ));
        }
        if self.initial_state.q.len() != n || self.initial_state.dq.len() != n {
            return Err(SimError::Invalid(
                "initial state has the wrong length".into(),
            ));
        }
        if !self.initial_state.is_finite() {
            return Err(SimError::Invalid("initial state is not finite".into()));
        }
        if self.wrist_lock && n <= crate::cbf::WRIST_JOINTS {
            return Err(SimError::Invalid(
                "wrist lock needs at least four joints".into(),
            ));
        }
        if let Some(h) = self.initial_h()? {
            if !(h > T::zero()) {
                return Err(SimError::UnsafeInitialState { h: h.as_f64() });
            }
        }
        Ok(())
    }

    /// `h` at the initial end-effector position, if an obstacle is present.
    pub fn initial_h(&self) -> Result<Option<T>, ModelError> {
        match &self.obstacle {
            None => Ok(None),
            Some(ob) => {
                let p = self.robot.forward_kinematics(&self.initial_state.q)?;
                Ok(Some(safety_h(&p, ob, &self.clearance)))
            }
        }
    }

    /// Copy with the obstacle radius and CBF gains replaced.
    pub fn with_setting(&self, r_o: T, params: CbfParams<T>) -> Self {
        let mut s = self.clone();
        if let Some(ob) = s.obstacle.as_mut() {
            ob.radius = r_o;
        }
        s.cbf = params;
        s
    }

    /// Number of integration steps covering `duration`.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round().as_f64().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow<T: Real> {
    pub t: T,
    pub q: DVector<T>,
    pub dq: DVector<T>,
    pub tau_nom: DVector<T>,
    pub tau_qp: DVector<T>,
    pub ee: Vector3<T>,
    pub ee_des: Vector3<T>,
    pub h: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    QpInfeasible,
    QpIterationLimit,
    NonFinite,
    Dynamics,
}

impl Fault {
    pub fn tag(&self) -> &'static str {
        match self {
            Fault::QpInfeasible => "qp_infeasible",
            Fault::QpIterationLimit => "qp_iteration_limit",
            Fault::NonFinite => "non_finite_state",
            Fault::Dynamics => "dynamics_error",
        }
    }
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult<T: Real> {
    pub log: Vec<LogRow<T>>,
    pub min_h: T,
    pub run_ctrl: T,
    pub run_tsep: T,
    /// Final Cartesian distance between actual and desired end effector.
    pub final_err: T,
    /// Final joint-space tracking error, infinity norm.
    pub final_joint_err: T,
    pub final_state: JointState<T>,
    /// Largest `A τ_qp - b` seen over the run.
    pub max_constraint_violation: T,
    pub filter_active_steps: usize,
    pub good_run: bool,
    pub fault: Option<Fault>,
}

/// Good run: obstacle never entered, terminal error within `end_tol` (inclusive), no fault.
pub fn evaluate_good_run<T: Real>(result: &RunResult<T>, end_tol: T) -> bool {
    result.fault.is_none() && result.min_h >= T::zero() && result.final_err <= end_tol
}

pub fn simulate<T: Real>(scenario: &Scenario<T>) -> Result<RunResult<T>, SimError> {
    run(scenario, true)
}

/// Same as [`simulate`] without retaining the per-step log.
pub fn simulate_summary<T: Real>(scenario: &Scenario<T>) -> Result<RunResult<T>, SimError> {
    run(scenario, false)
}

struct StepControl<T: Real> {
    tau_nom: DVector<T>,
    tau_qp: DVector<T>,
    tau_safe: DVector<T>,
    ee: Vector3<T>,
    h: T,
    violation: T,
}

/// Control output, desired EE position and desired joint position.
type StepOutput<T> = (StepControl<T>, Vector3<T>, DVector<T>);

fn control_step<T: Real>(
    scenario: &Scenario<T>,
    state: &JointState<T>,
    t: T,
) -> Result<StepOutput<T>, Fault> {
    let robot = &*scenario.robot;
    let sample = scenario.trajectory.sample(t);
    let (mass, bias) = robot.dynamics_terms(state).map_err(|_| Fault::Dynamics)?;
    let ee = robot.ee_kinematics(state).map_err(|_| Fault::Dynamics)?;
    let tau_nom = ctc_from_terms(&mass, &bias, state, &sample, &scenario.gains)
        .map_err(|_| Fault::Dynamics)?;
    let ee_des = robot
        .forward_kinematics(&sample.q_d)
        .map_err(|_| Fault::Dynamics)?;
    let control = match &scenario.obstacle {
        None => StepControl {
            tau_qp: DVector::zeros(tau_nom.len()),
            tau_safe: tau_nom.clone(),
            tau_nom,
            ee: ee.pos,
            h: T::max_value().unwrap_or_else(T::one),
            violation: T::zero(),
        },
        Some(ob) => {
            let row = constraint_from_terms(
                &ee,
                &mass,
                &bias,
                &tau_nom,
                ob,
                &scenario.clearance,
                &scenario.cbf,
            )
            .map_err(|_| Fault::Dynamics)?;
            let (tau_safe, tau_qp) = solve_filter_qp(
                std::slice::from_ref(&row),
                &tau_nom,
                scenario.wrist_lock,
                &scenario.solver,
            )
            .map_err(|e| match e {
                FilterError::Infeasible { .. } => Fault::QpInfeasible,
                FilterError::IterationLimit => Fault::QpIterationLimit,
                _ => Fault::Dynamics,
            })?;
            let violation = (&row.a * &tau_qp)[(0, 0)] - row.b;
            StepControl {
                tau_nom,
                tau_qp,
                tau_safe,
                ee: ee.pos,
                h: row.h,
                violation,
            }
        }
    };
    Ok((control, ee_des, sample.q_d))
}

/// One classical RK4 step of `q̈ = M⁻¹(τ - bias)` with `τ` held constant.
pub fn rk4_step<T: Real>(
    robot: &RobotModel<T>,
    state: &JointState<T>,
    tau: &DVector<T>,
    dt: T,
) -> Result<JointState<T>, ModelError> {
    let half = dt * T::lit(0.5);
    let accel = |q: &DVector<T>, dq: &DVector<T>| {
        robot.forward_dynamics(&JointState::new(q.clone(), dq.clone()), tau)
    };
    let (q, dq) = (&state.q, &state.dq);
    let k1v = dq.clone();
    let k1a = accel(q, dq)?;
    let k2v = dq + &k1a * half;
    let k2a = accel(&(q + &k1v * half), &k2v)?;
    let k3v = dq + &k2a * half;
    let k3a = accel(&(q + &k2v * half), &k3v)?;
    let k4v = dq + &k3a * dt;
    let k4a = accel(&(q + &k3v * dt), &k4v)?;
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let q_next = q + (k1v + k2v * two + k3v * two + k4v) * sixth;
    let dq_next = dq + (k1a + k2a * two + k3a * two + k4a) * sixth;
    Ok(JointState::new(q_next, dq_next))
}

fn run<T: Real>(scenario: &Scenario<T>, keep_log: bool) -> Result<RunResult<T>, SimError> {
    scenario.validate()?;
    let steps = scenario.steps();
    let dt = scenario.dt;
    let mut state = scenario.initial_state.clone();
    let mut log = Vec::with_capacity(if keep_log { steps + 1 } else { 0 });
    let mut min_h = T::max_value().unwrap_or_else(T::one);
    let (mut run_ctrl, mut run_tsep) = (T::zero(), T::zero());
    let mut final_err = T::zero();
    let mut final_joint_err = T::zero();
    let mut max_violation = -T::max_value().unwrap_or_else(T::one);
    let mut active_steps = 0;
    let mut fault = None;

    for k in 0..=steps {
        let t = dt * T::lit(k as f64);
        let (ctl, ee_des, q_d) = match control_step(scenario, &state, t) {
            Ok(v) => v,
            Err(f) => {
                fault = Some(f);
                break;
            }
        };
        min_h = min_h.min(ctl.h);
        max_violation = max_violation.max(ctl.violation);
        if ctl.tau_qp.amax() > T::lit(1e-12) {
            active_steps += 1;
        }
        let sep = (ctl.ee - ee_des).norm();
        final_err = sep;
        final_joint_err = (&state.q - &q_d).amax();
        let effort = match scenario.effort {
            EffortMetric::TotalTorque => ctl.tau_safe.norm(),
            EffortMetric::FilterTorque => ctl.tau_qp.norm(),
        };
        let tau_safe = ctl.tau_safe.clone();
        if keep_log {
            log.push(LogRow {
                t,
                q: state.q.clone(),
                dq: state.dq.clone(),
                tau_nom: ctl.tau_nom,
                tau_qp: ctl.tau_qp,
                ee: ctl.ee,
                ee_des,
                h: ctl.h,
            });
        }
        if k == steps {
            break;
        }
        run_ctrl += effort * dt;
        run_tsep += sep * dt;
        match rk4_step(&scenario.robot, &state, &tau_safe, dt) {
            Ok(next) if next.is_finite() => state = next,
            Ok(_) => {
                fault = Some(Fault::NonFinite);
                break;
            }
            Err(_) => {
                fault = Some(Fault::Dynamics);
                break;
            }
        }
    }

    let mut result = RunResult {
        log,
        min_h,
        run_ctrl,
        run_tsep,
        final_err,
        final_joint_err,
        final_state: state,
        max_constraint_violation: max_violation,
        filter_active_steps: active_steps,
        good_run: false,
        fault,
    };
    result.good_run = evaluate_good_run(&result, scenario.end_tol);
    Ok(result)
}
