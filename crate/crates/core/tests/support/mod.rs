//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ecbf_core::qp::QpProblem;
use ecbf_core::robot::{LinkSpec, RobotModel};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector3};
use rand::Rng;

pub const G: f64 = 9.81;

/// Planar arm, unit links, unit point masses at the link tips, gravity along -y.
pub fn two_link() -> RobotModel<f64> {
    let links = vec![
        LinkSpec::point_mass(1.0, 0.0, 0.0, 1.0),
        LinkSpec::point_mass(1.0, 0.0, 0.0, 1.0),
    ];
    RobotModel::new(links, Vector3::new(0.0, -G, 0.0), None).unwrap()
}

pub fn two_link_mass(q2: f64) -> Matrix2<f64> {
    let c2 = q2.cos();
    Matrix2::new(3.0 + 2.0 * c2, 1.0 + c2, 1.0 + c2, 1.0)
}

pub fn two_link_gravity(q1: f64, q2: f64) -> Vector2<f64> {
    let c1 = q1.cos();
    let c12 = (q1 + q2).cos();
    Vector2::new(G * (2.0 * c1 + c12), G * c12)
}

pub fn two_link_coriolis(q2: f64, dq1: f64, dq2: f64) -> Vector2<f64> {
    let s2 = q2.sin();
    Vector2::new(-s2 * (2.0 * dq1 * dq2 + dq2 * dq2), s2 * dq1 * dq1)
}

pub fn two_link_jacobian(q1: f64, q2: f64) -> [[f64; 2]; 3] {
    let (s1, c1) = q1.sin_cos();
    let (s12, c12) = (q1 + q2).sin_cos();
    [[-s1 - s12, -s12], [c1 + c12, c12], [0.0, 0.0]]
}

/// Homogeneous DH chain `Rz(θ) Tz(d) Tx(a) Rx(α)`, written out element by element.
pub fn dh_chain_position(model: &RobotModel<f64>, q: &[f64]) -> Vector3<f64> {
    let mut t = Matrix4::<f64>::identity();
    for (link, &qi) in model.links().iter().zip(q) {
        let th = qi + link.theta_offset;
        let (st, ct) = th.sin_cos();
        let (sa, ca) = link.alpha.sin_cos();
        #[rustfmt::skip]
        let a = Matrix4::new(
            ct, -st * ca,  st * sa, link.a * ct,
            st,  ct * ca, -ct * sa, link.a * st,
            0.0,      sa,       ca, link.d,
            0.0,     0.0,      0.0, 1.0,
        );
        t *= a;
    }
    Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Random strictly convex QP with a known feasible point.
pub fn random_qp<R: Rng>(rng: &mut R) -> QpProblem<f64> {
    let n = rng.random_range(2..=5);
    let m_in = rng.random_range(0..=6);
    let m_eq = rng.random_range(0..=n.min(2));
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    let f = random_vec(rng, n, 2.0);
    let x0 = random_vec(rng, n, 1.0);
    let a_in = DMatrix::from_fn(m_in, n, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_fn(m_in, |_, _| rng.random_range(0.0..0.5));
    let b_in = &a_in * &x0 + slack;
    let a_eq = DMatrix::from_fn(m_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = &a_eq * &x0;
    QpProblem::unconstrained(h, f)
        .with_inequalities(a_in, b_in)
        .with_equalities(a_eq, b_eq)
}

/// Minimiser by enumerating every candidate active set and solving its KKT system.
pub fn enumerate_qp(p: &QpProblem<f64>) -> Option<(DVector<f64>, f64)> {
    let n = p.f.len();
    let m_in = p.a_ineq.nrows();
    let m_eq = p.a_eq.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        let k = m_eq + active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        rhs.rows_mut(0, n).copy_from(&(-&p.f));
        for r in 0..k {
            let (row, b) = if r < m_eq {
                (p.a_eq.row(r).into_owned(), p.b_eq[r])
            } else {
                let i = active[r - m_eq];
                (p.a_ineq.row(i).into_owned(), p.b_ineq[i])
            };
            for c in 0..n {
                kkt[(n + r, c)] = row[c];
                kkt[(c, n + r)] = row[c];
            }
            rhs[n + r] = b;
        }
        let lu = kkt.lu();
        let Some(sol) = lu.solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        // the optimum is the cheapest feasible face minimiser, so multiplier signs are not needed
        let primal_ok = (0..m_in).all(|i| (p.a_ineq.row(i) * &x)[(0, 0)] <= p.b_ineq[i] + 1e-9);
        if !primal_ok {
            continue;
        }
        let obj = p.objective(&x);
        if best.as_ref().is_none_or(|(_, o)| obj < *o) {
            best = Some((x, obj));
        }
    }
    best
}
