//! Exponential CBF safety filter for a spherical obstacle around the end effector.
//!
//! The safe set is `h = |p_ee - c|² - r_m² >= 0`. The filter keeps
//! `ḧ + κ₂ ḣ + κ₁ h >= 0` by subtracting the smallest torque correction `τ_qp`
//! from the nominal torque, subject to `A τ_qp <= b` with `A = S J M⁻¹`.

use nalgebra::{DMatrix, DVector, RowDVector, Vector3};
use thiserror::Error;

use crate::qp::{ActiveSetSolver, QpError, QpProblem, QpStatus};
use crate::robot::{EeKinematics, JointState, ModelError, RobotModel};
use crate::scalar::Real;

/// Number of distal joints the wrist lock removes from the filter.
pub const WRIST_JOINTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("safety QP infeasible (h = {h})")]
    Infeasible { h: f64 },
    #[error("safety QP hit its iteration limit")]
    IterationLimit,
    #[error("wrist lock needs at least {min} joints, model has {0}", min = WRIST_JOINTS + 1)]
    TooFewJoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle<T: Real> {
    pub center: Vector3<T>,
    pub radius: T,
}

impl<T: Real> Obstacle<T> {
    pub fn new(center: Vector3<T>, radius: T) -> Option<Self> {
        (radius > T::zero() && center.iter().all(|v| v.is_finite()))
            .then_some(Self { center, radius })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClearanceSpec<T: Real> {
    pub r_ee: T,
    pub r_pad: T,
}

impl<T: Real> ClearanceSpec<T> {
    pub fn new(r_ee: T, r_pad: T) -> Option<Self> {
        (r_ee >= T::zero() && r_pad >= T::zero()).then_some(Self { r_ee, r_pad })
    }

    /// Combined keep-out radius `r_o + r_ee + r_pad`.
    pub fn margin(&self, obstacle: &Obstacle<T>) -> T {
        obstacle.radius + self.r_ee + self.r_pad
    }
}

/// ECBF gains; both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbfParams<T: Real> {
    pub kappa1: T,
    pub kappa2: T,
}

impl<T: Real> CbfParams<T> {
    pub fn new(kappa1: T, kappa2: T) -> Option<Self> {
        (kappa1 > T::zero() && kappa2 > T::zero()).then_some(Self { kappa1, kappa2 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbfDiagnostics<T: Real> {
    pub h: T,
    pub lfh: T,
    /// Drift part of the second derivative with `τ_qp = 0`.
    pub lf2h_nom: T,
    pub a: RowDVector<T>,
    pub b: T,
    pub tau_qp: DVector<T>,
    pub active: bool,
}

pub fn safety_h<T: Real>(
    ee_pos: &Vector3<T>,
    obstacle: &Obstacle<T>,
    clearance: &ClearanceSpec<T>,
) -> T {
    let rm = clearance.margin(obstacle);
    (ee_pos - obstacle.center).norm_squared() - rm * rm
}

pub fn lie_derivative_1<T: Real>(
    ee_pos: &Vector3<T>,
    ee_vel: &Vector3<T>,
    obstacle: &Obstacle<T>,
) -> T {
    (ee_pos - obstacle.center).dot(ee_vel) * T::lit(2.0)
}

/// Single ECBF row `A τ_qp <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfConstraint<T: Real> {
    pub a: RowDVector<T>,
    pub b: T,
    pub h: T,
    pub lfh: T,
    pub lf2h_nom: T,
}

/// Builds the constraint from precomputed kinematics and dynamics terms.
#[allow(clippy::too_many_arguments)]
pub fn constraint_from_terms<T: Real>(
    ee: &EeKinematics<T>,
    mass: &DMatrix<T>,
    bias: &DVector<T>,
    tau_nom: &DVector<T>,
    obstacle: &Obstacle<T>,
    clearance: &ClearanceSpec<T>,
    params: &CbfParams<T>,
) -> Result<CbfConstraint<T>, FilterError> {
    let n = mass.nrows();
    if tau_nom.len() != n {
        return Err(ModelError::Dimension {
            what: "tau_nom",
            expected: n,
            got: tau_nom.len(),
        }
        .into());
    }
    let two = T::lit(2.0);
    let sep = ee.pos - obstacle.center;
    let s_row = sep.transpose() * two;
    let chol = mass
        .clone()
        .cholesky()
        .ok_or(ModelError::SingularMassMatrix)?;

    let h = safety_h(&ee.pos, obstacle, clearance);
    let lfh = lie_derivative_1(&ee.pos, &ee.vel, obstacle);
    // A = S J M⁻¹, computed as (M⁻¹ Jᵀ Sᵀ)ᵀ since M is symmetric
    let js = ee.jacobian.transpose() * s_row.transpose();
    let a = chol.solve(&js).transpose();
    let gamma1 = ee.vel.norm_squared() * two;
    let gamma2 = gamma1 + (s_row * ee.jdot_qdot)[(0, 0)];
    let lf2h_nom = gamma2 + (&a * (tau_nom - bias))[(0, 0)];
    let b = lf2h_nom + params.kappa2 * lfh + params.kappa1 * h;
    Ok(CbfConstraint {
        a,
        b,
        h,
        lfh,
        lf2h_nom,
    })
}

pub fn assemble_constraint<T: Real>(
    model: &RobotModel<T>,
    state: &JointState<T>,
    tau_nom: &DVector<T>,
    obstacle: &Obstacle<T>,
    clearance: &ClearanceSpec<T>,
    params: &CbfParams<T>,
) -> Result<CbfConstraint<T>, FilterError> {
    let ee = model.ee_kinematics(state)?;
    let (mass, bias) = model.dynamics_terms(state)?;
    constraint_from_terms(&ee, &mass, &bias, tau_nom, obstacle, clearance, params)
}

/// Minimal-norm `τ_qp` for a set of ECBF rows; returns `(τ_safe, τ_qp)`.
pub fn solve_filter_qp<T: Real>(
    rows: &[CbfConstraint<T>],
    tau_nom: &DVector<T>,
    wrist_lock: bool,
    solver: &ActiveSetSolver<T>,
) -> Result<(DVector<T>, DVector<T>), FilterError> {
    let n = tau_nom.len();
    if wrist_lock && n <= WRIST_JOINTS {
        return Err(FilterError::TooFewJoints(n));
    }
    let mut a = DMatrix::zeros(rows.len(), n);
    let mut b = DVector::zeros(rows.len());
    for (i, row) in rows.iter().enumerate() {
        a.set_row(i, &row.a);
        b[i] = row.b;
    }
    let mut problem = QpProblem::unconstrained(DMatrix::identity(n, n), DVector::zeros(n))
        .with_inequalities(a, b);
    if wrist_lock {
        let mut a_eq = DMatrix::zeros(WRIST_JOINTS, n);
        for k in 0..WRIST_JOINTS {
            a_eq[(k, n - 1 - k)] = T::one();
        }
        problem = problem.with_equalities(a_eq, DVector::zeros(WRIST_JOINTS));
    }
    let sol = solver.solve(&problem)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            let h = rows
                .iter()
                .map(|r| r.h.as_f64())
                .fold(f64::INFINITY, f64::min);
            return Err(FilterError::Infeasible { h });
        }
        QpStatus::IterationLimit => return Err(FilterError::IterationLimit),
    }
    let tau_qp = sol.x;
    Ok((tau_nom - &tau_qp, tau_qp))
}

/// Safety filter: `τ_safe = τ_nom - τ_qp` with `τ_qp` the minimal correction.
#[allow(clippy::too_many_arguments)]
pub fn filter<T: Real>(
    model: &RobotModel<T>,
    state: &JointState<T>,
    tau_nom: &DVector<T>,
    obstacle: &Obstacle<T>,
    clearance: &ClearanceSpec<T>,
    params: &CbfParams<T>,
    wrist_lock: bool,
    solver: &ActiveSetSolver<T>,
) -> Result<(DVector<T>, CbfDiagnostics<T>), FilterError> {
    let row = assemble_constraint(model, state, tau_nom, obstacle, clearance, params)?;
    let (tau_safe, tau_qp) =
        solve_filter_qp(std::slice::from_ref(&row), tau_nom, wrist_lock, solver)?;
    Ok((tau_safe, diagnostics(row, tau_qp)))
}

pub fn diagnostics<T: Real>(row: CbfConstraint<T>, tau_qp: DVector<T>) -> CbfDiagnostics<T> {
    let active = tau_qp.amax() > T::lit(1e-12);
    CbfDiagnostics {
        h: row.h,
        lfh: row.lfh,
        lf2h_nom: row.lf2h_nom,
        a: row.a,
        b: row.b,
        tau_qp,
        active,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obstacle(r: f64) -> Obstacle<f64> {
        Obstacle::new(Vector3::zeros(), r).unwrap()
    }

    #[test]
    fn h_examples() {
        let cl = ClearanceSpec::new(0.1, 0.05).unwrap();
        let ob = obstacle(0.2);
        let rm: f64 = 0.35;
        assert!(safety_h(&Vector3::new(rm, 0.0, 0.0), &ob, &cl).abs() < 1e-15);
        assert!((safety_h(&Vector3::zeros(), &ob, &cl) + rm * rm).abs() < 1e-15);
        assert!((safety_h(&Vector3::new(1.0, 0.0, 0.0), &ob, &cl) - 0.8775).abs() < 1e-12);
    }

    #[test]
    fn first_lie_derivative_examples() {
        let ob = obstacle(0.2);
        let p = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(lie_derivative_1(&p, &Vector3::zeros(), &ob), 0.0);
        assert_eq!(
            lie_derivative_1(&p, &Vector3::new(-1.0, 0.0, 0.0), &ob),
            -2.0
        );
    }

    #[test]
    fn parameter_constructors_enforce_positivity() {
        assert!(CbfParams::new(1.0, 0.0).is_none());
        assert!(CbfParams::new(0.5, 2.0).is_some());
        assert!(Obstacle::new(Vector3::<f64>::zeros(), 0.0).is_none());
        assert!(ClearanceSpec::new(-0.1, 0.0).is_none());
    }

    #[test]
    fn wrist_lock_needs_four_joints() {
        let row = CbfConstraint {
            a: RowDVector::from_vec(vec![1.0, 1.0, 1.0]),
            b: -1.0,
            h: 0.1,
            lfh: 0.0,
            lf2h_nom: 0.0,
        };
        let err = solve_filter_qp(
            &[row],
            &DVector::zeros(3),
            true,
            &ActiveSetSolver::default(),
        )
        .unwrap_err();
        assert_eq!(err, FilterError::TooFewJoints(3));
    }

    #[test]
    fn degenerate_wrist_alignment_is_infeasible() {
        // only wrist joints can act on the constraint while it is violated
        let row = CbfConstraint {
            a: RowDVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
            b: -0.5,
            h: 0.01,
            lfh: 0.0,
            lf2h_nom: 0.0,
        };
        let err = solve_filter_qp(
            &[row],
            &DVector::zeros(6),
            true,
            &ActiveSetSolver::default(),
        )
        .unwrap_err();
        assert!(matches!(err, FilterError::Infeasible { .. }));
    }
}
