//! Convex quadratic programs with equality, inequality and box constraints.
//!
//! ```text
//! minimize    ½ zᵀ P z + qᵀ z + constant
//! subject to  A_eq z = b_eq,  A_in z ≤ b_in,  lower ≤ z ≤ upper
//! ```
//!
//! Multipliers follow the sign convention of the Lagrangian
//! `L = f + y_eqᵀ(A_eq z − b_eq) + y_inᵀ(A_in z − b_in) + y_boxᵀ(z − clamp)`:
//! `y_in ≥ 0`, and `y_box` is nonnegative at an upper bound and nonpositive at a
//! lower bound.

mod active_set;
mod admm;
mod builder;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use admm::solve_qp;
pub use builder::{LinearForm, QpBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub constant: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// A problem over `n` unbounded variables with no constraints.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            constant: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    /// `½zᵀPz + qᵀz` over `lower ≤ z ≤ upper`.
    pub fn box_constrained(p: DMatrix<f64>, q: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        Self {
            lower,
            upper,
            ..Self::unconstrained(p, q)
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z) + self.constant
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let shapes_ok = self.p.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.b_in.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !shapes_ok {
            return Err(Error::DimensionMismatch("inconsistent QP dimensions".into()));
        }
        let finite = self
            .p
            .iter()
            .chain(self.q.iter())
            .chain(self.a_eq.iter())
            .chain(self.b_eq.iter())
            .chain(self.a_in.iter())
            .chain(self.b_in.iter())
            .all(|v| v.is_finite())
            && self.constant.is_finite();
        if !finite {
            return Err(Error::Build("QP data contains non-finite entries".into()));
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::Build("box bounds with lower > upper".into()));
        }
        if (&self.p - self.p.transpose()).amax() > 1e-9 * self.p.amax().max(1.0) {
            return Err(Error::Build("quadratic cost matrix is not symmetric".into()));
        }
        Ok(())
    }

    /// Writes the problem as JSON; infinite bounds become `null`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&QpDump::from(self))?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    InfeasibleNumerics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    /// Iterations between adaptive step updates and polishing attempts.
    pub check_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub dual_eq: DVector<f64>,
    pub dual_in: DVector<f64>,
    pub dual_box: DVector<f64>,
    pub status: QpStatus,
    /// Largest constraint violation.
    pub primal_residual: f64,
    /// Infinity norm of the Lagrangian gradient.
    pub dual_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
}

/// First-order optimality measures of a primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub stationarity: f64,
    /// Largest multiplier sign violation.
    pub dual_sign: f64,
    /// Largest `|multiplier · constraint gap|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.stationarity).max(self.dual_sign).max(self.complementarity)
    }
}

pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let z = &sol.primal;
    let grad = &p.p * z + &p.q + p.a_eq.transpose() * &sol.dual_eq + p.a_in.transpose() * &sol.dual_in + &sol.dual_box;
    let mut primal: f64 = 0.0;
    let mut dual_sign: f64 = 0.0;
    let mut complementarity: f64 = 0.0;

    let eq = &p.a_eq * z - &p.b_eq;
    primal = primal.max(eq.amax());

    let ineq = &p.a_in * z - &p.b_in;
    for (g, y) in ineq.iter().zip(sol.dual_in.iter()) {
        primal = primal.max(*g);
        dual_sign = dual_sign.max(-y);
        complementarity = complementarity.max((y * g).abs());
    }

    for i in 0..z.len() {
        let (lo, hi, zi, y) = (p.lower[i], p.upper[i], z[i], sol.dual_box[i]);
        primal = primal.max(lo - zi).max(zi - hi);
        if lo == hi {
            continue;
        }
        let gap = if y >= 0.0 { hi - zi } else { zi - lo };
        if gap.is_finite() {
            complementarity = complementarity.max((y * gap).abs());
        } else if y != 0.0 {
            dual_sign = dual_sign.max(y.abs());
        }
    }

    KktResiduals {
        primal: primal.max(0.0),
        stationarity: grad.amax(),
        dual_sign,
        complementarity,
    }
}

/// JSON form of a [`QpProblem`] for external verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpDump {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub constant: f64,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<Vec<f64>>,
    pub b_in: Vec<f64>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn finite_or_none(v: &DVector<f64>) -> Vec<Option<f64>> {
    v.iter().map(|x| x.is_finite().then_some(*x)).collect()
}

impl From<&QpProblem> for QpDump {
    fn from(p: &QpProblem) -> Self {
        Self {
            p: rows(&p.p),
            q: p.q.iter().copied().collect(),
            constant: p.constant,
            a_eq: rows(&p.a_eq),
            b_eq: p.b_eq.iter().copied().collect(),
            a_in: rows(&p.a_in),
            b_in: p.b_in.iter().copied().collect(),
            lower: finite_or_none(&p.lower),
            upper: finite_or_none(&p.upper),
        }
    }
}

impl QpDump {
    pub fn into_problem(self) -> Result<QpProblem> {
        let n = self.q.len();
        let matrix = |r: &[Vec<f64>]| -> Result<DMatrix<f64>> {
            if r.iter().any(|row| row.len() != n) {
                return Err(Error::DimensionMismatch("matrix row length differs from variable count".into()));
            }
            Ok(DMatrix::from_fn(r.len(), n, |i, j| r[i][j]))
        };
        let problem = QpProblem {
            p: matrix(&self.p)?,
            q: DVector::from_vec(self.q),
            constant: self.constant,
            a_eq: matrix(&self.a_eq)?,
            b_eq: DVector::from_vec(self.b_eq),
            a_in: matrix(&self.a_in)?,
            b_in: DVector::from_vec(self.b_in),
            lower: DVector::from_iterator(n, self.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY))),
            upper: DVector::from_iterator(n, self.upper.iter().map(|v| v.unwrap_or(f64::INFINITY))),
        };
        problem.validate()?;
        Ok(problem)
    }
}

#[cfg(test)]
mod tests;
