//! Convex quadratic programs with equality and box constraints.
//!
//! ```text
//! minimize    1/2 x'Px + q'x
//! subject to  A_eq x = b_eq
//!             lb <= x <= ub
//! ```
//!
//! Solved by an operator-splitting (ADMM) iteration with a fixed penalty,
//! over-relaxation and Ruiz equilibration, followed by an optional polishing
//! step that solves the equality-constrained problem on the detected active
//! set.

mod admm;
mod dump;
mod l1;

pub use admm::solve_with_initial;
pub use dump::{read_dump, write_dump};
pub use l1::{reformulate_l1, L1Reformulation, L1Term};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::inf_norm;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
}

impl QuadraticProgram {
    /// `P` is symmetrized as `(P + P') / 2`.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        if p.shape() != (n, n) {
            return Err(Error::dim(format!("P is {:?}, expected {n}x{n}", p.shape())));
        }
        if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() {
            return Err(Error::dim(format!(
                "A_eq is {:?} with {} right-hand sides for {n} variables",
                a_eq.shape(),
                b_eq.len()
            )));
        }
        if lb.len() != n || ub.len() != n {
            return Err(Error::dim("bound vectors must match the variable count"));
        }
        if let Some(i) = (0..n).find(|&i| lb[i] > ub[i] || lb[i].is_nan() || ub[i].is_nan()) {
            return Err(Error::arg(format!("variable {i}: lower bound exceeds upper bound")));
        }
        if p.iter().chain(q.iter()).chain(a_eq.iter()).chain(b_eq.iter()).any(|v| !v.is_finite()) {
            return Err(Error::arg("problem data must be finite"));
        }
        let p = (&p + p.transpose()) * 0.5;
        Ok(Self { p, q, a_eq, b_eq, lb, ub })
    }

    /// Problem with no constraints at all.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(
            p,
            q,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }

    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }

    pub fn lb(&self) -> &DVector<f64> {
        &self.lb
    }

    pub fn ub(&self) -> &DVector<f64> {
        &self.ub
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// KKT residuals of a primal-dual point. `y_bound[i] > 0` pushes on the
    /// upper bound of variable `i`, `y_bound[i] < 0` on the lower bound, so that
    /// stationarity reads `Px + q + A_eq' y_eq + y_bound = 0`.
    pub fn kkt_residuals(&self, x: &DVector<f64>, y_eq: &DVector<f64>, y_bound: &DVector<f64>) -> KktResiduals {
        let grad = &self.p * x + &self.q + self.a_eq.transpose() * y_eq + y_bound;
        let eq_viol = if self.num_eq() > 0 { inf_norm(&(&self.a_eq * x - &self.b_eq)) } else { 0.0 };
        let mut bound_viol = 0.0_f64;
        let mut compl = 0.0_f64;
        for i in 0..self.num_vars() {
            bound_viol = bound_viol.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
            let mu = y_bound[i];
            let c = if mu > 0.0 {
                if self.ub[i].is_finite() { mu * (self.ub[i] - x[i]).abs() } else { mu }
            } else if mu < 0.0 {
                if self.lb[i].is_finite() { -mu * (x[i] - self.lb[i]).abs() } else { -mu }
            } else {
                0.0
            };
            compl = compl.max(c);
        }
        KktResiduals { stationarity: inf_norm(&grad), primal: eq_viol.max(bound_viol), complementarity: compl }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Tolerance of the primal infeasibility certificate test.
    pub eps_infeasible: f64,
    pub max_iter: usize,
    /// ADMM penalty for bound rows; equality rows use `rho * eq_rho_scale`.
    pub rho: f64,
    pub eq_rho_scale: f64,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub scaling_iters: usize,
    pub polish: bool,
    /// Residuals are evaluated every `check_every` iterations.
    pub check_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-7,
            max_iter: 20_000,
            rho: 0.1,
            eq_rho_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            polish: true,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_bound: DVector<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub polished: bool,
    /// Human-readable note for non-optimal outcomes.
    pub diagnostic: Option<String>,
}

/// Solves from a zero initial iterate.
pub fn solve(qp: &QuadraticProgram, settings: &QpSettings) -> QpSolution {
    solve_with_initial(qp, settings, None)
}
