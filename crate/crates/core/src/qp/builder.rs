use nalgebra::{DMatrix, DVector};

use super::QpProblem;

/// A sparse linear form `Σ coeff·z[index]`.
pub type LinearForm = Vec<(usize, f64)>;

/// Incremental assembly of a [`QpProblem`], including exact-penalty slacks.
#[derive(Debug, Clone)]
pub struct QpBuilder {
    n: usize,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    constant: f64,
    eq: Vec<(LinearForm, f64)>,
    ineq: Vec<(LinearForm, f64)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl QpBuilder {
    /// `n` unbounded variables, zero objective.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            p: Vec::new(),
            q: vec![0.0; n],
            constant: 0.0,
            eq: Vec::new(),
            ineq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    fn add_var(&mut self, lo: f64, hi: f64) -> usize {
        self.q.push(0.0);
        self.lower.push(lo);
        self.upper.push(hi);
        self.n += 1;
        self.n - 1
    }

    pub fn set_bounds(&mut self, i: usize, lo: f64, hi: f64) {
        self.lower[i] = lo;
        self.upper[i] = hi;
    }

    /// Adds `value` to `P[i][j]` and, off the diagonal, to `P[j][i]`.
    pub fn add_quadratic(&mut self, i: usize, j: usize, value: f64) {
        self.p.push((i, j, value));
        if i != j {
            self.p.push((j, i, value));
        }
    }

    pub fn add_linear(&mut self, i: usize, value: f64) {
        self.q[i] += value;
    }

    pub fn add_constant(&mut self, value: f64) {
        self.constant += value;
    }

    pub fn add_equality(&mut self, form: LinearForm, rhs: f64) {
        self.eq.push((form, rhs));
    }

    /// `form·z ≤ rhs`.
    pub fn add_inequality(&mut self, form: LinearForm, rhs: f64) {
        self.ineq.push((form, rhs));
    }

    /// Adds `weight·max(0, form·z + offset)` through a new nonnegative slack
    /// `s ≥ form·z + offset`; returns the slack index.
    pub fn add_hinge_penalty(&mut self, mut form: LinearForm, offset: f64, weight: f64) -> usize {
        let s = self.add_var(0.0, f64::INFINITY);
        self.q[s] = weight;
        form.push((s, -1.0));
        self.ineq.push((form, -offset));
        s
    }

    /// Adds `weight·|form·z + offset|` through a new nonnegative slack with
    /// `s ≥ form·z + offset` and `s ≥ −(form·z + offset)`; returns the slack index.
    pub fn add_abs_penalty(&mut self, form: LinearForm, offset: f64, weight: f64) -> usize {
        let s = self.add_var(0.0, f64::INFINITY);
        self.q[s] = weight;
        let mut up = form.clone();
        up.push((s, -1.0));
        self.ineq.push((up, -offset));
        let mut down: LinearForm = form.into_iter().map(|(i, c)| (i, -c)).collect();
        down.push((s, -1.0));
        self.ineq.push((down, offset));
        s
    }

    fn dense(rows: &[(LinearForm, f64)], n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, (form, rhs)) in rows.iter().enumerate() {
            for &(j, c) in form {
                a[(r, j)] += c;
            }
            b[r] = *rhs;
        }
        (a, b)
    }

    pub fn build(&self) -> QpProblem {
        let mut p = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.p {
            p[(i, j)] += v;
        }
        let (a_eq, b_eq) = Self::dense(&self.eq, self.n);
        let (a_in, b_in) = Self::dense(&self.ineq, self.n);
        QpProblem {
            p,
            q: DVector::from_column_slice(&self.q),
            constant: self.constant,
            a_eq,
            b_eq,
            a_in,
            b_in,
            lower: DVector::from_column_slice(&self.lower),
            upper: DVector::from_column_slice(&self.upper),
        }
    }
}
