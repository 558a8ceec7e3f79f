//! Serial-arm kinematics and rigid-body dynamics from standard (distal) DH parameters.
//!
//! Link `i` is rigidly attached to DH frame `i`, which sits at the distal end of the link.
//! Joint `i` rotates about the `z` axis of frame `i - 1`. All recursions run in world
//! coordinates; only the bias vector and mass matrix are returned in joint space.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("robot model has no links")]
    Empty,
    #[error("link {index}: {reason}")]
    InvalidLink { index: usize, reason: String },
    #[error("friction coefficients must be non-negative (joint {0})")]
    NegativeFriction(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,
    #[error("invalid robot file: {0}")]
    Parse(String),
}

/// Kinematic and inertial description of one revolute link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec<T: Real> {
    pub a: T,
    pub alpha: T,
    pub d: T,
    pub theta_offset: T,
    pub mass: T,
    /// Centre of mass in the link frame.
    pub com: Vector3<T>,
    /// Rotational inertia about the centre of mass, link frame.
    pub inertia: Matrix3<T>,
}

impl<T: Real> LinkSpec<T> {
    /// Massless-geometry helper: a point mass at the link frame origin.
    pub fn point_mass(a: T, alpha: T, d: T, mass: T) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset: T::zero(),
            mass,
            com: Vector3::zeros(),
            inertia: Matrix3::zeros(),
        }
    }

    fn validate(&self, index: usize) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidLink {
            index,
            reason: reason.to_string(),
        };
        let finite = [self.a, self.alpha, self.d, self.theta_offset, self.mass]
            .iter()
            .all(|v| v.is_finite())
            && self.com.iter().all(|v| v.is_finite())
            && self.inertia.iter().all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite parameter"));
        }
        if self.mass <= T::zero() {
            return Err(bad("mass must be positive"));
        }
        let scale = self.inertia.amax().max(T::one());
        let tol = T::lit(1e-9) * scale;
        if (self.inertia - self.inertia.transpose()).amax() > tol {
            return Err(bad("inertia is not symmetric"));
        }
        let eig = self.inertia.symmetric_eigenvalues();
        if eig.iter().any(|&e| e < -tol) {
            return Err(bad("inertia has a negative principal moment"));
        }
        let (e0, e1, e2) = (eig[0], eig[1], eig[2]);
        if e0 + e1 < e2 - tol || e1 + e2 < e0 - tol || e0 + e2 < e1 - tol {
            return Err(bad("principal moments violate the triangle inequality"));
        }
        Ok(())
    }

    /// Homogeneous transform from frame `i-1` to frame `i` for joint angle `q`.
    fn local_transform(&self, q: T) -> (Matrix3<T>, Vector3<T>) {
        let theta = q + self.theta_offset;
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        let rot = Matrix3::new(
            ct,
            -st * ca,
            st * sa,
            st,
            ct * ca,
            -ct * sa,
            T::zero(),
            sa,
            ca,
        );
        let pos = Vector3::new(self.a * ct, self.a * st, self.d);
        (rot, pos)
    }
}

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState<T: Real> {
    pub q: DVector<T>,
    pub dq: DVector<T>,
}

impl<T: Real> JointState<T> {
    pub fn new(q: DVector<T>, dq: DVector<T>) -> Self {
        Self { q, dq }
    }

    pub fn at_rest(q: DVector<T>) -> Self {
        let n = q.len();
        Self {
            q,
            dq: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.dq.iter()).all(|v| v.is_finite())
    }
}

/// Immutable description of an n-joint revolute serial arm.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel<T: Real> {
    links: Vec<LinkSpec<T>>,
    gravity: Vector3<T>,
    friction: DVector<T>,
}

/// World-frame pose of every DH frame; index 0 is the base.
struct Chain<T: Real> {
    rot: Vec<Matrix3<T>>,
    pos: Vec<Vector3<T>>,
}

impl<T: Real> Chain<T> {
    fn axis(&self, joint: usize) -> Vector3<T> {
        self.rot[joint].column(2).into_owned()
    }

    fn com(&self, link: usize, spec: &LinkSpec<T>) -> Vector3<T> {
        self.pos[link + 1] + self.rot[link + 1] * spec.com
    }

    fn end(&self) -> Vector3<T> {
        *self.pos.last().expect("chain always holds the base frame")
    }
}

/// Per-link world-frame motion produced by the outward recursion.
struct Motion<T: Real> {
    omega: Vec<Vector3<T>>,
    alpha: Vec<Vector3<T>>,
    /// Linear acceleration of each DH frame origin; index 0 is the base.
    origin_acc: Vec<Vector3<T>>,
}

/// End-effector position, velocity and the terms needed by a position-level CBF.
#[derive(Debug, Clone, PartialEq)]
pub struct EeKinematics<T: Real> {
    pub pos: Vector3<T>,
    pub vel: Vector3<T>,
    pub jacobian: Matrix3xX<T>,
    pub jdot_qdot: Vector3<T>,
}

impl<T: Real> RobotModel<T> {
    pub fn new(
        links: Vec<LinkSpec<T>>,
        gravity: Vector3<T>,
        friction: Option<DVector<T>>,
    ) -> Result<Self, ModelError> {
        if links.is_empty() {
            return Err(ModelError::Empty);
        }
        for (i, link) in links.iter().enumerate() {
            link.validate(i)?;
        }
        if !gravity.iter().all(|g| g.is_finite()) {
            return Err(ModelError::NonFinite("gravity"));
        }
        let n = links.len();
        let friction = friction.unwrap_or_else(|| DVector::zeros(n));
        if friction.len() != n {
            return Err(ModelError::Dimension {
                what: "friction",
                expected: n,
                got: friction.len(),
            });
        }
        if let Some(i) = friction.iter().position(|f| !(*f >= T::zero())) {
            return Err(ModelError::NegativeFriction(i));
        }
        Ok(Self {
            links,
            gravity,
            friction,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[LinkSpec<T>] {
        &self.links
    }

    pub fn gravity(&self) -> &Vector3<T> {
        &self.gravity
    }

    pub fn friction(&self) -> &DVector<T> {
        &self.friction
    }

    /// Same model with a different gravity vector.
    pub fn with_gravity(mut self, gravity: Vector3<T>) -> Self {
        self.gravity = gravity;
        self
    }

    fn check_len(&self, what: &'static str, v: &DVector<T>) -> Result<(), ModelError> {
        if v.len() != self.n_joints() {
            return Err(ModelError::Dimension {
                what,
                expected: self.n_joints(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn check_state(&self, state: &JointState<T>) -> Result<(), ModelError> {
        self.check_len("q", &state.q)?;
        self.check_len("dq", &state.dq)
    }

    fn chain(&self, q: &DVector<T>) -> Chain<T> {
        let n = self.n_joints();
        let mut rot = Vec::with_capacity(n + 1);
        let mut pos = Vec::with_capacity(n + 1);
        rot.push(Matrix3::identity());
        pos.push(Vector3::zeros());
        for (i, link) in self.links.iter().enumerate() {
            let (r, p) = link.local_transform(q[i]);
            let next_p = pos[i] + rot[i] * p;
            let next_r = rot[i] * r;
            rot.push(next_r);
            pos.push(next_p);
        }
        Chain { rot, pos }
    }

    fn outward(
        &self,
        chain: &Chain<T>,
        dq: &DVector<T>,
        qdd: Option<&DVector<T>>,
        base_acc: Vector3<T>,
    ) -> Motion<T> {
        let n = self.n_joints();
        let mut omega = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut origin_acc = Vec::with_capacity(n + 1);
        origin_acc.push(base_acc);
        let (mut w_prev, mut a_prev) = (Vector3::zeros(), Vector3::zeros());
        for i in 0..n {
            let z = chain.axis(i);
            let spin = z * dq[i];
            let w = w_prev + spin;
            let mut a = a_prev + w_prev.cross(&spin);
            if let Some(qdd) = qdd {
                a += z * qdd[i];
            }
            let r = chain.pos[i + 1] - chain.pos[i];
            let acc = origin_acc[i] + a.cross(&r) + w.cross(&w.cross(&r));
            origin_acc.push(acc);
            omega.push(w);
            alpha.push(a);
            w_prev = w;
            a_prev = a;
        }
        Motion {
            omega,
            alpha,
            origin_acc,
        }
    }

    /// Recursive Newton-Euler; `gravity_on` toggles the base acceleration trick.
    fn rnea(
        &self,
        q: &DVector<T>,
        dq: &DVector<T>,
        qdd: Option<&DVector<T>>,
        gravity_on: bool,
    ) -> DVector<T> {
        let n = self.n_joints();
        let chain = self.chain(q);
        let base_acc = if gravity_on {
            -self.gravity
        } else {
            Vector3::zeros()
        };
        let motion = self.outward(&chain, dq, qdd, base_acc);
        let mut tau = DVector::zeros(n);
        let mut f_next = Vector3::zeros();
        let mut n_next = Vector3::zeros();
        for i in (0..n).rev() {
            let link = &self.links[i];
            let c = chain.com(i, link);
            let joint = chain.pos[i];
            let w = motion.omega[i];
            let al = motion.alpha[i];
            let rc = c - joint;
            let acc_c = motion.origin_acc[i] + al.cross(&rc) + w.cross(&w.cross(&rc));
            let inertia = chain.rot[i + 1] * link.inertia * chain.rot[i + 1].transpose();
            let lin = acc_c * link.mass;
            let f = lin + f_next;
            let mom = n_next
                + (chain.pos[i + 1] - joint).cross(&f_next)
                + rc.cross(&lin)
                + inertia * al
                + w.cross(&(inertia * w));
            tau[i] = chain.axis(i).dot(&mom) + self.friction[i] * dq[i];
            f_next = f;
            n_next = mom;
        }
        tau
    }

    /// World-frame position of the end-effector frame origin.
    pub fn forward_kinematics(&self, q: &DVector<T>) -> Result<Vector3<T>, ModelError> {
        self.check_len("q", q)?;
        Ok(self.chain(q).end())
    }

    /// Linear-velocity Jacobian of the end-effector origin (3 x n).
    pub fn jacobian(&self, q: &DVector<T>) -> Result<Matrix3xX<T>, ModelError> {
        self.check_len("q", q)?;
        Ok(self.jacobian_of(&self.chain(q)))
    }

    fn jacobian_of(&self, chain: &Chain<T>) -> Matrix3xX<T> {
        let n = self.n_joints();
        let end = chain.end();
        let mut jac = Matrix3xX::zeros(n);
        for i in 0..n {
            jac.set_column(i, &chain.axis(i).cross(&(end - chain.pos[i])));
        }
        jac
    }

    /// `J̇(q) q̇`: end-effector acceleration with zero joint acceleration and no gravity.
    pub fn jdot_qdot(&self, state: &JointState<T>) -> Result<Vector3<T>, ModelError> {
        self.check_state(state)?;
        let chain = self.chain(&state.q);
        let motion = self.outward(&chain, &state.dq, None, Vector3::zeros());
        Ok(*motion.origin_acc.last().expect("n >= 1"))
    }

    /// Position, velocity, Jacobian and `J̇q̇` from a single kinematic pass.
    pub fn ee_kinematics(&self, state: &JointState<T>) -> Result<EeKinematics<T>, ModelError> {
        self.check_state(state)?;
        let chain = self.chain(&state.q);
        let jacobian = self.jacobian_of(&chain);
        let motion = self.outward(&chain, &state.dq, None, Vector3::zeros());
        Ok(EeKinematics {
            pos: chain.end(),
            vel: &jacobian * &state.dq,
            jacobian,
            jdot_qdot: *motion.origin_acc.last().expect("n >= 1"),
        })
    }

    /// Joint-space inertia matrix by the composite-rigid-body recursion.
    pub fn mass_matrix(&self, q: &DVector<T>) -> Result<DMatrix<T>, ModelError> {
        self.check_len("q", q)?;
        Ok(self.crba(&self.chain(q)))
    }

    fn crba(&self, chain: &Chain<T>) -> DMatrix<T> {
        let n = self.n_joints();
        let mut m = DMatrix::zeros(n, n);
        // composite of links i..n: mass, first moment, inertia about the world origin
        let mut mass = T::zero();
        let mut first = Vector3::zeros();
        let mut inertia_o = Matrix3::zeros();
        for i in (0..n).rev() {
            let link = &self.links[i];
            let c = chain.com(i, link);
            let rot = &chain.rot[i + 1];
            let i_c = rot * link.inertia * rot.transpose();
            let shift = (Matrix3::identity() * c.norm_squared() - c * c.transpose()) * link.mass;
            inertia_o += i_c + shift;
            first += c * link.mass;
            mass += link.mass;

            let z = chain.axis(i);
            let o = chain.pos[i];
            let lin_mom = z.cross(&(first - o * mass));
            let ang_mom_o = inertia_o * z - first.cross(&z.cross(&o));
            for j in 0..=i {
                let zj = chain.axis(j);
                let oj = chain.pos[j];
                let val = zj.dot(&(ang_mom_o - oj.cross(&lin_mom)));
                m[(j, i)] = val;
                m[(i, j)] = val;
            }
        }
        m
    }

    /// Coriolis/centripetal, friction and gravity torques: `τ = M q̈ + bias`.
    pub fn bias_forces(&self, state: &JointState<T>) -> Result<DVector<T>, ModelError> {
        self.check_state(state)?;
        Ok(self.rnea(&state.q, &state.dq, None, true))
    }

    /// Joint torques producing `qdd` from `state` (recursive Newton-Euler).
    pub fn inverse_dynamics(
        &self,
        state: &JointState<T>,
        qdd: &DVector<T>,
    ) -> Result<DVector<T>, ModelError> {
        self.check_state(state)?;
        self.check_len("qdd", qdd)?;
        Ok(self.rnea(&state.q, &state.dq, Some(qdd), true))
    }

    /// Mass matrix and bias forces for the same state.
    pub fn dynamics_terms(
        &self,
        state: &JointState<T>,
    ) -> Result<(DMatrix<T>, DVector<T>), ModelError> {
        self.check_state(state)?;
        let chain = self.chain(&state.q);
        let m = self.crba(&chain);
        Ok((m, self.rnea(&state.q, &state.dq, None, true)))
    }

    /// Joint accelerations `M⁻¹(τ - bias)`.
    pub fn forward_dynamics(
        &self,
        state: &JointState<T>,
        tau: &DVector<T>,
    ) -> Result<DVector<T>, ModelError> {
        self.check_len("tau", tau)?;
        let (m, bias) = self.dynamics_terms(state)?;
        let chol = m.cholesky().ok_or(ModelError::SingularMassMatrix)?;
        Ok(chol.solve(&(tau - bias)))
    }

    pub fn kinetic_energy(&self, state: &JointState<T>) -> Result<T, ModelError> {
        let m = self.mass_matrix(&state.q)?;
        self.check_len("dq", &state.dq)?;
        Ok((state.dq.transpose() * m * &state.dq)[(0, 0)] * T::lit(0.5))
    }
}

/// JSON layout of a robot model file (radians, metres, kilograms).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RobotModelFile {
    pub n_joints: usize,
    pub links: Vec<LinkFile>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinkFile {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub mass: f64,
    pub com: [f64; 3],
    pub inertia: [[f64; 3]; 3],
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

impl RobotModelFile {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_model<T: Real>(&self) -> Result<RobotModel<T>, ModelError> {
        if self.links.len() != self.n_joints {
            return Err(ModelError::Dimension {
                what: "links",
                expected: self.n_joints,
                got: self.links.len(),
            });
        }
        let links = self
            .links
            .iter()
            .map(|l| LinkSpec {
                a: T::lit(l.a),
                alpha: T::lit(l.alpha),
                d: T::lit(l.d),
                theta_offset: T::lit(l.theta_offset),
                mass: T::lit(l.mass),
                com: Vector3::from_iterator(l.com.iter().map(|&v| T::lit(v))),
                inertia: Matrix3::from_fn(|r, c| T::lit(l.inertia[r][c])),
            })
            .collect();
        let gravity = Vector3::from_iterator(self.gravity.iter().map(|&v| T::lit(v)));
        let friction = self
            .friction
            .as_ref()
            .map(|f| DVector::from_iterator(f.len(), f.iter().map(|&v| T::lit(v))));
        RobotModel::new(links, gravity, friction)
    }
}

/// UR10-like six-joint arm shipped with the crate.
pub const UR10_JSON: &str = include_str!("../data/ur10.json");

pub fn ur10<T: Real>() -> RobotModel<T> {
    RobotModelFile::from_json(UR10_JSON)
        .and_then(|f| f.to_model())
        .expect("bundled robot model is valid")
}
