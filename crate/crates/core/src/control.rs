//! Desired joint trajectory and the computed-torque nominal controller.

use nalgebra::DVector;

use crate::robot::{JointState, ModelError, RobotModel};
use crate::scalar::Real;

/// Single-joint sweep with the remaining joints held at a home posture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec<T: Real> {
    pub sweep_joint: usize,
    pub theta_start: T,
    pub theta_end: T,
    pub duration: T,
    pub home_posture: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample<T: Real> {
    pub q_d: DVector<T>,
    pub dq_d: DVector<T>,
    pub ddq_d: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtcGains<T: Real> {
    pub kp: T,
    pub kd: T,
}

impl<T: Real> CtcGains<T> {
    pub fn new(kp: T, kd: T) -> Option<Self> {
        (kp > T::zero() && kd > T::zero()).then_some(Self { kp, kd })
    }
}

impl<T: Real> TrajectorySpec<T> {
    pub fn is_valid(&self) -> bool {
        self.duration > T::zero()
            && self.sweep_joint < self.home_posture.len()
            && self.theta_start.is_finite()
            && self.theta_end.is_finite()
            && self.home_posture.iter().all(|v| v.is_finite())
    }

    /// Quintic time scaling with zero boundary velocity and acceleration, clamped past `duration`.
    pub fn sample(&self, t: T) -> TrajectorySample<T> {
        let n = self.home_posture.len();
        let mut q_d = self.home_posture.clone();
        let mut dq_d = DVector::zeros(n);
        let mut ddq_d = DVector::zeros(n);

        let s = (t / self.duration).max(T::zero()).min(T::one());
        let (s2, s3) = (s * s, s * s * s);
        let pos = s3 * (T::lit(10.0) - T::lit(15.0) * s + T::lit(6.0) * s2);
        let vel = s2 * (T::lit(30.0) - T::lit(60.0) * s + T::lit(30.0) * s2) / self.duration;
        let acc = s * (T::lit(60.0) - T::lit(180.0) * s + T::lit(120.0) * s2)
            / (self.duration * self.duration);

        let span = self.theta_end - self.theta_start;
        let j = self.sweep_joint;
        q_d[j] = self.theta_start + span * pos;
        dq_d[j] = span * vel;
        ddq_d[j] = span * acc;
        TrajectorySample { q_d, dq_d, ddq_d }
    }
}

pub fn sample_trajectory<T: Real>(spec: &TrajectorySpec<T>, t: T) -> TrajectorySample<T> {
    spec.sample(t)
}

/// `τ = bias(q, q̇) + M(q)(q̈_d - kd(q̇ - q̇_d) - kp(q - q_d))`.
pub fn ctc_torque<T: Real>(
    model: &RobotModel<T>,
    state: &JointState<T>,
    sample: &TrajectorySample<T>,
    gains: &CtcGains<T>,
) -> Result<DVector<T>, ModelError> {
    let (m, bias) = model.dynamics_terms(state)?;
    ctc_from_terms(&m, &bias, state, sample, gains)
}

/// Computed torque from precomputed `M` and bias terms.
pub fn ctc_from_terms<T: Real>(
    mass: &nalgebra::DMatrix<T>,
    bias: &DVector<T>,
    state: &JointState<T>,
    sample: &TrajectorySample<T>,
    gains: &CtcGains<T>,
) -> Result<DVector<T>, ModelError> {
    let n = state.q.len();
    for (what, v) in [
        ("q_d", &sample.q_d),
        ("dq_d", &sample.dq_d),
        ("ddq_d", &sample.ddq_d),
    ] {
        if v.len() != n {
            return Err(ModelError::Dimension {
                what,
                expected: n,
                got: v.len(),
            });
        }
    }
    let e = &state.q - &sample.q_d;
    let de = &state.dq - &sample.dq_d;
    let cmd = &sample.ddq_d - de * gains.kd - e * gains.kp;
    Ok(bias + mass * cmd)
}
