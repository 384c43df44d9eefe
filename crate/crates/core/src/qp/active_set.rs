//! Primal active-set refinement of an approximate QP solution.
//!
//! Starting from a feasible point obtained by projecting the ADMM iterate
//! onto a guessed working set, each step solves the equality-constrained
//! problem on the working set (variables held at an active bound are
//! eliminated), moves until the first blocking constraint, and drops the
//! constraint with the most wrong-signed multiplier once stationary.

use nalgebra::{DMatrix, DVector};

use super::admm::Stacked;
use super::{QpProblem, QpSettings};

const KKT_DELTA: f64 = 1e-9;
const REFINE_STEPS: usize = 3;
const MAX_STEPS: usize = 200;
const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Side {
    Free,
    Lower,
    Upper,
}

struct Layout<'a> {
    st: &'a Stacked,
    n: usize,
}

impl Layout<'_> {
    fn box_row(&self, i: usize) -> Option<usize> {
        let first = self.st.n_eq + self.st.n_in;
        (i >= first).then(|| i - first)
    }

    fn fixed(&self, i: usize) -> bool {
        self.st.l[i] == self.st.u[i]
    }

    fn bound(&self, i: usize, side: Side) -> f64 {
        match side {
            Side::Lower => self.st.l[i],
            _ => self.st.u[i],
        }
    }

    fn row_dot(&self, i: usize, v: &DVector<f64>) -> f64 {
        match self.box_row(i) {
            Some(j) => v[j],
            None => self.st.a.row(i).transpose().dot(v),
        }
    }
}

/// Solves `min ½pᵀHp + gᵀp` subject to the working set holding with equality
/// at `x + p`. Returns the step and the stacked multipliers at `x + p`.
fn working_set_step(
    lay: &Layout,
    hess: &DMatrix<f64>,
    g: &DVector<f64>,
    x: &DVector<f64>,
    sides: &[Side],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = lay.n;
    let m = sides.len();
    let mut p = DVector::zeros(n);
    let mut is_fixed = vec![false; n];
    let mut general = Vec::new();
    for i in 0..m {
        if sides[i] == Side::Free {
            continue;
        }
        match lay.box_row(i) {
            Some(j) => {
                is_fixed[j] = true;
                p[j] = lay.bound(i, sides[i]) - x[j];
            }
            None => general.push(i),
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| !is_fixed[j]).collect();
    let (nf, r) = (free.len(), general.len());
    let dim = nf + r;

    let hp_fixed = hess * &p;
    let mut exact = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (a, &ja) in free.iter().enumerate() {
        for (b, &jb) in free.iter().enumerate() {
            exact[(a, b)] = hess[(ja, jb)];
        }
        rhs[a] = -g[ja] - hp_fixed[ja];
    }
    for (k, &i) in general.iter().enumerate() {
        for (a, &ja) in free.iter().enumerate() {
            let v = lay.st.a[(i, ja)];
            exact[(nf + k, a)] = v;
            exact[(a, nf + k)] = v;
        }
        rhs[nf + k] = lay.bound(i, sides[i]) - lay.row_dot(i, x) - lay.row_dot(i, &p);
    }
    let mut reg = exact.clone();
    for d in 0..dim {
        reg[(d, d)] += if d < nf { KKT_DELTA } else { -KKT_DELTA };
    }
    let mut sol = DVector::zeros(dim);
    if dim > 0 {
        let lu = reg.lu();
        sol = lu.solve(&rhs)?;
        for _ in 0..REFINE_STEPS {
            let res = &rhs - &exact * &sol;
            sol += lu.solve(&res)?;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for (a, &ja) in free.iter().enumerate() {
        p[ja] = sol[a];
    }

    // Multipliers of `Hx + g + Aᵀy = 0`: solved rows from the KKT system, box
    // rows of held variables from the stationarity residual.
    let mut y = DVector::zeros(m);
    let mut grad = hess * &p + g;
    for (k, &i) in general.iter().enumerate() {
        y[i] = sol[nf + k];
        grad += lay.st.a.row(i).transpose() * y[i];
    }
    for i in 0..m {
        if let Some(j) = lay.box_row(i) {
            if sides[i] != Side::Free {
                y[i] = -grad[j];
            }
        }
    }
    Some((p, y))
}

fn feasible(lay: &Layout, x: &DVector<f64>) -> bool {
    (0..lay.st.l.len()).all(|i| {
        let v = lay.row_dot(i, x);
        let scale = 1.0 + v.abs();
        v >= lay.st.l[i] - FEASIBILITY_TOL * scale && v <= lay.st.u[i] + FEASIBILITY_TOL * scale
    })
}

/// Minimum-norm correction of `x` onto the working set, if the result is
/// feasible for every constraint.
fn feasible_start(lay: &Layout, x: &DVector<f64>, sides: &[Side]) -> Option<DVector<f64>> {
    let identity = DMatrix::identity(lay.n, lay.n);
    let (p, _) = working_set_step(lay, &identity, &DVector::zeros(lay.n), x, sides)?;
    let start = x + p;
    feasible(lay, &start).then_some(start)
}

/// Refines `x` to a KKT point. `sides` is the initial working-set guess;
/// equality rows and fixed variables are always kept.
pub(super) fn refine(
    problem: &QpProblem,
    st: &Stacked,
    x: &DVector<f64>,
    mut sides: Vec<Side>,
    settings: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let lay = Layout {
        st,
        n: problem.num_vars(),
    };
    let m = sides.len();
    for i in 0..m {
        if lay.fixed(i) {
            sides[i] = Side::Lower;
        }
    }
    let mut x = match feasible_start(&lay, x, &sides) {
        Some(x) => x,
        None => {
            // Fall back to the constraints that are already tight at the
            // clamped iterate.
            let mut clamped = x.clone();
            for j in 0..lay.n {
                let i = m - lay.n + j;
                clamped[j] = clamped[j].clamp(st.l[i], st.u[i]);
            }
            for i in 0..m {
                if lay.fixed(i) {
                    continue;
                }
                let v = lay.row_dot(i, &clamped);
                sides[i] = if (v - st.l[i]).abs() <= settings.eps_primal {
                    Side::Lower
                } else if (st.u[i] - v).abs() <= settings.eps_primal {
                    Side::Upper
                } else {
                    Side::Free
                };
            }
            feasible_start(&lay, &clamped, &sides)?
        }
    };

    for _ in 0..MAX_STEPS {
        let g = &problem.p * &x + &problem.q;
        let (p, y) = working_set_step(&lay, &problem.p, &g, &x, &sides)?;
        let p_norm = p.amax();
        if !p_norm.is_finite() {
            return None;
        }
        if p_norm <= 1e-12 * (1.0 + x.amax()) {
            x += &p;
            let worst = (0..m)
                .filter(|&i| !lay.fixed(i) && sides[i] != Side::Free)
                .map(|i| (i, if sides[i] == Side::Lower { y[i] } else { -y[i] }))
                .filter(|&(_, v)| v > settings.eps_dual)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((i, _)) => sides[i] = Side::Free,
                None => return Some((x, y)),
            }
            continue;
        }

        let mut step = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if sides[i] != Side::Free {
                continue;
            }
            let ap = lay.row_dot(i, &p);
            if ap.abs() <= 1e-14 * p_norm {
                continue;
            }
            let ax = lay.row_dot(i, &x);
            let (t, side) = if ap > 0.0 {
                ((st.u[i] - ax) / ap, Side::Upper)
            } else {
                ((st.l[i] - ax) / ap, Side::Lower)
            };
            let t = t.max(0.0);
            if t < step {
                step = t;
                blocking = Some((i, side));
            }
        }
        match blocking {
            Some((i, side)) => sides[i] = side,
            None if p_norm > 1e12 => return None,
            None => {}
        }
        x += &p * step;
    }
    None
}
