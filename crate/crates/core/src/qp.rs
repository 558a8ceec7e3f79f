//! Dense primal active-set solver for small strictly convex quadratic programs
//!
//! ```text
//!     minimize     1/2 x' H x + f' x
//!     subject to   A_ineq x <= b_ineq
//!                  A_eq   x  = b_eq
//! ```
//!
//! Equalities are eliminated through an orthonormal null-space basis for the feasibility
//! phase; a single-artificial simplex then finds a feasible start, and the active-set
//! iteration keeps every equality row in the working set.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("hessian is not symmetric")]
    NotSymmetric,
    #[error("hessian is not positive definite")]
    NotStrictlyConvex,
    #[error("equality constraints are rank deficient")]
    RankDeficient,
    #[error("non-finite problem data")]
    NonFinite,
    #[error("singular KKT system")]
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub h: DMatrix<T>,
    pub f: DVector<T>,
    pub a_ineq: DMatrix<T>,
    pub b_ineq: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn unconstrained(h: DMatrix<T>, f: DVector<T>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<T>, b: DVector<T>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<T>, b: DVector<T>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<T>) -> T {
        (x.transpose() * &self.h * x)[(0, 0)] * T::lit(0.5) + self.f.dot(x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension("H"));
        }
        if self.a_ineq.ncols() != n || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(QpError::Dimension("A_ineq"));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension("A_eq"));
        }
        if self.a_eq.nrows() > n {
            return Err(QpError::RankDeficient);
        }
        let all_finite = self.h.iter().all(|v| v.is_finite())
            && self.f.iter().all(|v| v.is_finite())
            && self.a_ineq.iter().all(|v| v.is_finite())
            && self.b_ineq.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(QpError::NonFinite);
        }
        let scale = self.h.amax().max(T::one());
        if (&self.h - self.h.transpose()).amax() > T::lit(1e-12) * scale {
            return Err(QpError::NotSymmetric);
        }
        if self.h.clone().cholesky().is_none() {
            return Err(QpError::NotStrictlyConvex);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    /// Inequality rows held active at termination.
    pub active_set: Vec<usize>,
    /// Inequality multipliers (zero for inactive rows).
    pub lambda: DVector<T>,
    /// Equality multipliers.
    pub nu: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub iterations: usize,
}

impl<T: Real> QpSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// KKT residuals of a candidate primal-dual pair, all in infinity norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals<T: Real> {
    pub primal_ineq: T,
    pub primal_eq: T,
    pub stationarity: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Real> KktResiduals<T> {
    pub fn max(&self) -> T {
        self.primal_ineq
            .max(self.primal_eq)
            .max(self.stationarity)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals<T: Real>(problem: &QpProblem<T>, sol: &QpSolution<T>) -> KktResiduals<T> {
    let x = &sol.x;
    let slack = &problem.a_ineq * x - &problem.b_ineq;
    let eq = &problem.a_eq * x - &problem.b_eq;
    let grad = &problem.h * x
        + &problem.f
        + problem.a_ineq.transpose() * &sol.lambda
        + problem.a_eq.transpose() * &sol.nu;
    let fold = |it: &mut dyn Iterator<Item = T>| it.fold(T::zero(), |m, v| m.max(v));
    KktResiduals {
        primal_ineq: fold(&mut slack.iter().map(|&s| s.max(T::zero()))),
        primal_eq: eq.amax(),
        stationarity: grad.amax(),
        dual: fold(&mut sol.lambda.iter().map(|&l| (-l).max(T::zero()))),
        complementarity: fold(
            &mut sol
                .lambda
                .iter()
                .zip(slack.iter())
                .map(|(&l, &s)| (l * s).abs()),
        ),
    }
}

/// Solver settings; `tol` bounds the KKT residuals of optimal solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSetSolver<T: Real> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for ActiveSetSolver<T> {
    fn default() -> Self {
        Self {
            tol: T::default_tol(),
            max_iter: 50,
        }
    }
}

pub fn solve<T: Real>(
    problem: &QpProblem<T>,
    tol: T,
    max_iter: usize,
) -> Result<QpSolution<T>, QpError> {
    ActiveSetSolver { tol, max_iter }.solve(problem)
}

impl<T: Real> ActiveSetSolver<T> {
    pub fn solve(&self, problem: &QpProblem<T>) -> Result<QpSolution<T>, QpError> {
        problem.validate()?;
        let n = problem.n();
        let p = problem.a_ineq.nrows();
        let r = problem.a_eq.nrows();

        let start = match self.feasible_start(problem)? {
            Some(x) => x,
            None => {
                return Ok(QpSolution {
                    x: DVector::zeros(n),
                    active_set: Vec::new(),
                    lambda: DVector::zeros(p),
                    nu: DVector::zeros(r),
                    objective: T::zero(),
                    status: QpStatus::Infeasible,
                    iterations: 0,
                })
            }
        };

        let mut x = start;
        let mut working: Vec<usize> = Vec::new();
        let step_tol = T::default_epsilon().sqrt() * T::lit(1e-4);
        // set after a full unblocked step: x already minimises the working-set subproblem
        let mut at_minimum = false;
        for iter in 1..=self.max_iter {
            let (step, mult) = self.eqp_step(problem, &x, &working)?;
            let x_scale = x.amax().max(T::one());
            if at_minimum || step.amax() <= step_tol * x_scale {
                let nu = mult.rows(0, r).into_owned();
                let ineq_mult = mult.rows(r, working.len());
                let most_negative = ineq_mult
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l < -self.tol)
                    .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite multipliers"));
                match most_negative {
                    Some((k, _)) => {
                        working.remove(k);
                        at_minimum = false;
                    }
                    None => {
                        let mut lambda = DVector::zeros(p);
                        for (k, &row) in working.iter().enumerate() {
                            lambda[row] = ineq_mult[k].max(T::zero());
                        }
                        let mut active_set = working.clone();
                        active_set.sort_unstable();
                        return Ok(QpSolution {
                            objective: problem.objective(&x),
                            x,
                            active_set,
                            lambda,
                            nu,
                            status: QpStatus::Optimal,
                            iterations: iter,
                        });
                    }
                }
                continue;
            }

            // ratio test over rows outside the working set
            let mut alpha = T::one();
            let mut blocking = None;
            for i in 0..p {
                if working.contains(&i) {
                    continue;
                }
                let row = problem.a_ineq.row(i);
                let rate = row.dot(&step.transpose());
                if rate > step_tol {
                    let slack = problem.b_ineq[i] - row.dot(&x.transpose());
                    let ratio = (slack / rate).max(T::zero());
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
            x += step * alpha;
            match blocking {
                Some(i) => working.push(i),
                None => at_minimum = true,
            }
        }

        Ok(QpSolution {
            objective: problem.objective(&x),
            x,
            active_set: working,
            lambda: DVector::zeros(p),
            nu: DVector::zeros(r),
            status: QpStatus::IterationLimit,
            iterations: self.max_iter,
        })
    }

    /// Equality-constrained subproblem on the current working set.
    /// Returns the step and the multipliers (equalities first, then working rows).
    fn eqp_step(
        &self,
        problem: &QpProblem<T>,
        x: &DVector<T>,
        working: &[usize],
    ) -> Result<(DVector<T>, DVector<T>), QpError> {
        let n = problem.n();
        let r = problem.a_eq.nrows();
        let m = r + working.len();
        let grad = &problem.h * x + &problem.f;
        if m == 0 {
            let chol = problem
                .h
                .clone()
                .cholesky()
                .ok_or(QpError::NotStrictlyConvex)?;
            return Ok((-chol.solve(&grad), DVector::zeros(0)));
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&problem.h);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        for k in 0..m {
            let row = if k < r {
                problem.a_eq.row(k)
            } else {
                problem.a_ineq.row(working[k - r])
            };
            for j in 0..n {
                kkt[(n + k, j)] = row[j];
                kkt[(j, n + k)] = row[j];
            }
        }
        let sol = kkt.lu().solve(&rhs).ok_or(QpError::Numerical)?;
        Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }

    /// Phase 1: a point satisfying all constraints, or `None` when the set is empty.
    fn feasible_start(&self, problem: &QpProblem<T>) -> Result<Option<DVector<T>>, QpError> {
        let n = problem.n();
        let r = problem.a_eq.nrows();
        let homogeneous = problem.b_eq.iter().all(|v| *v == T::zero());

        if r == 0 || homogeneous {
            let slack = &problem.b_ineq - &problem.a_ineq * DVector::<T>::zeros(n);
            if slack.iter().all(|&s| s >= -self.tol) {
                return Ok(Some(DVector::zeros(n)));
            }
        }

        let (particular, null_basis) = if r == 0 {
            (DVector::zeros(n), DMatrix::identity(n, n))
        } else {
            self.eliminate_equalities(problem)?
        };
        let g = &problem.a_ineq * &null_basis;
        let h = &problem.b_ineq - &problem.a_ineq * &particular;
        if h.iter().all(|&s| s >= -self.tol) {
            return Ok(Some(particular));
        }
        Ok(phase_one_simplex(&g, &h, self.tol).map(|y| particular + null_basis * y))
    }

    /// Particular solution of `A_eq x = b_eq` and an orthonormal basis of its null space.
    fn eliminate_equalities(
        &self,
        problem: &QpProblem<T>,
    ) -> Result<(DVector<T>, DMatrix<T>), QpError> {
        let n = problem.n();
        let r = problem.a_eq.nrows();
        let mut stacked = DMatrix::zeros(n, r + n);
        stacked
            .view_mut((0, 0), (n, r))
            .copy_from(&problem.a_eq.transpose());
        stacked
            .view_mut((0, r), (n, n))
            .copy_from(&DMatrix::identity(n, n));
        let qr = stacked.qr();
        let q = qr.q();
        let upper = qr.r();
        let r1 = upper.view((0, 0), (r, r)).into_owned();
        let scale = problem.a_eq.amax().max(T::one());
        if (0..r).any(|i| r1[(i, i)].abs() <= T::lit(1e-10) * scale) {
            return Err(QpError::RankDeficient);
        }
        // A_eq = R1' Q1', so x = Q1 y with R1' y = b_eq
        let y = r1
            .transpose()
            .solve_lower_triangular(&problem.b_eq)
            .ok_or(QpError::RankDeficient)?;
        let q1 = q.view((0, 0), (n, r));
        let particular = q1 * y;
        let null_basis = q.view((0, r), (n, n - r)).into_owned();
        Ok((particular, null_basis))
    }
}

/// Finds `y` with `G y <= h` by minimising a single artificial `t` in standard form:
/// `G u - G v - t 1 + w = h`, all variables non-negative. Bland's rule prevents cycling.
fn phase_one_simplex<T: Real>(g: &DMatrix<T>, h: &DVector<T>, tol: T) -> Option<DVector<T>> {
    let (rows, k) = g.shape();
    let t_col = 2 * k;
    let cols = 2 * k + 1 + rows;
    let mut tab = DMatrix::zeros(rows, cols + 1);
    for i in 0..rows {
        for j in 0..k {
            tab[(i, j)] = g[(i, j)];
            tab[(i, k + j)] = -g[(i, j)];
        }
        tab[(i, t_col)] = -T::one();
        tab[(i, t_col + 1 + i)] = T::one();
        tab[(i, cols)] = h[i];
    }
    let mut basis: Vec<usize> = (0..rows).map(|i| t_col + 1 + i).collect();
    let worst = (0..rows)
        .min_by(|&a, &b| h[a].partial_cmp(&h[b]).expect("finite rhs"))
        .expect("phase one called with at least one row");
    pivot(&mut tab, &mut basis, worst, t_col);

    let mut cost = DVector::zeros(cols);
    cost[t_col] = T::one();
    let max_pivots = 50 * (rows + cols);
    for _ in 0..max_pivots {
        // reduced costs
        let entering = (0..cols).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let mut rc = cost[j];
            for (i, &b) in basis.iter().enumerate() {
                rc -= cost[b] * tab[(i, j)];
            }
            rc < -T::lit(1e-12)
        });
        let Some(col) = entering else { break };
        let mut leave: Option<(usize, T)> = None;
        for i in 0..rows {
            let a = tab[(i, col)];
            if a > T::lit(1e-12) {
                let ratio = tab[(i, cols)] / a;
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - T::lit(1e-14)
                            || ((ratio - lr).abs() <= T::lit(1e-14) && basis[i] < basis[li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        // min t is bounded below by zero, so an unbounded ray cannot occur
        let (row, _) = leave?;
        pivot(&mut tab, &mut basis, row, col);
    }

    let mut values = DVector::zeros(cols);
    for (i, &b) in basis.iter().enumerate() {
        values[b] = tab[(i, cols)];
    }
    let scale = h.amax().max(T::one());
    if values[t_col] > tol * scale {
        return None;
    }
    Some(DVector::from_fn(k, |j, _| values[j] - values[k + j]))
}

fn pivot<T: Real>(tab: &mut DMatrix<T>, basis: &mut [usize], row: usize, col: usize) {
    let p = tab[(row, col)];
    let width = tab.ncols();
    for j in 0..width {
        tab[(row, j)] /= p;
    }
    for i in 0..tab.nrows() {
        if i == row {
            continue;
        }
        let factor = tab[(i, col)];
        if factor != T::zero() {
            for j in 0..width {
                let v = tab[(row, j)];
                tab[(i, j)] -= factor * v;
            }
        }
    }
    basis[row] = col;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn unconstrained_identity_gives_origin() {
        let p = QpProblem::unconstrained(eye(3), DVector::zeros(3));
        let s = solve(&p, 1e-8, 50).unwrap();
        assert!(s.is_optimal());
        assert_eq!(s.x, DVector::zeros(3));
    }

    #[test]
    fn single_bound_projects() {
        let p = QpProblem::unconstrained(eye(1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, -1.0),
        );
        let s = solve(&p, 1e-8, 50).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.active_set, vec![0]);
        assert!((s.lambda[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hyperplane_projection_identity() {
        let a = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.5]);
        let b = -1.7;
        let p = QpProblem::unconstrained(eye(4), DVector::zeros(4)).with_inequalities(
            DMatrix::from_row_slice(1, 4, a.as_slice()),
            DVector::from_element(1, b),
        );
        let s = solve(&p, 1e-8, 50).unwrap();
        let expect = &a * (b / a.dot(&a));
        assert!((s.x - expect).amax() < 1e-10);
    }

    #[test]
    fn detects_infeasibility() {
        // x <= -1 and -x <= -1
        let p = QpProblem::unconstrained(eye(1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        );
        assert_eq!(solve(&p, 1e-8, 50).unwrap().status, QpStatus::Infeasible);

        // x0 = 0 as an equality with x0 >= 1
        let p = QpProblem::unconstrained(eye(2), DVector::zeros(2))
            .with_inequalities(
                DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]),
                DVector::from_element(1, -1.0),
            )
            .with_equalities(
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                DVector::zeros(1),
            );
        assert_eq!(solve(&p, 1e-8, 50).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn equalities_with_nonzero_rhs() {
        let p = QpProblem::unconstrained(eye(3), DVector::from_vec(vec![1.0, 0.0, -2.0]))
            .with_equalities(
                DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
                DVector::from_element(1, 3.0),
            )
            .with_inequalities(
                DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]),
                DVector::from_element(1, 1.0),
            );
        let s = solve(&p, 1e-8, 50).unwrap();
        assert!(s.is_optimal());
        assert!((s.x.sum() - 3.0).abs() < 1e-10);
        assert!(kkt_residuals(&p, &s).max() < 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
        );
        assert_eq!(solve(&p, 1e-8, 50).unwrap_err(), QpError::NotSymmetric);
        let p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
        );
        assert_eq!(solve(&p, 1e-8, 50).unwrap_err(), QpError::NotStrictlyConvex);
        let p = QpProblem::unconstrained(eye(2), DVector::zeros(2)).with_equalities(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            DVector::zeros(2).add_scalar(1.0),
        );
        assert_eq!(solve(&p, 1e-8, 50).unwrap_err(), QpError::RankDeficient);
        let p = QpProblem::unconstrained(eye(2), DVector::zeros(3));
        assert!(matches!(solve(&p, 1e-8, 50), Err(QpError::Dimension(_))));
    }

    #[test]
    fn reports_iteration_limit() {
        let p = QpProblem::unconstrained(eye(2), DVector::from_vec(vec![-5.0, -5.0]))
            .with_inequalities(
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
                DVector::from_vec(vec![1.0, 1.0]),
            );
        assert_eq!(solve(&p, 1e-8, 1).unwrap().status, QpStatus::IterationLimit);
        assert!(solve(&p, 1e-8, 50).unwrap().is_optimal());
    }
}
