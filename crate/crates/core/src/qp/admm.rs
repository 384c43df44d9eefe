//! Operator-splitting solver in the style of OSQP.
//!
//! All constraints are stacked as `l ≤ A z ≤ u` with
//! `A = [A_eq; A_in; I]`. The problem is equilibrated with modified Ruiz
//! scaling, iterated with relaxed ADMM on the reduced linear system
//! `P + σI + Aᵀ diag(ρ) A`, and periodically polished by an active-set
//! refinement seeded with the constraints the iterate deems active.

use nalgebra::{DMatrix, DVector};

use super::active_set::{refine, Side};
use super::{QpProblem, QpSettings, QpSolution, QpStatus};
use crate::error::Result;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const SCALING_MIN: f64 = 1e-4;
const SCALING_MAX: f64 = 1e4;

pub(super) struct Stacked {
    pub(super) a: DMatrix<f64>,
    pub(super) l: DVector<f64>,
    pub(super) u: DVector<f64>,
    pub(super) n_eq: usize,
    pub(super) n_in: usize,
}

fn stack(p: &QpProblem) -> Stacked {
    let n = p.num_vars();
    let (n_eq, n_in) = (p.a_eq.nrows(), p.a_in.nrows());
    let m = n_eq + n_in + n;
    let mut a = DMatrix::zeros(m, n);
    a.rows_mut(0, n_eq).copy_from(&p.a_eq);
    a.rows_mut(n_eq, n_in).copy_from(&p.a_in);
    a.view_mut((n_eq + n_in, 0), (n, n)).fill_with_identity();
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    l.rows_mut(0, n_eq).copy_from(&p.b_eq);
    u.rows_mut(0, n_eq).copy_from(&p.b_eq);
    l.rows_mut(n_eq, n_in).fill(f64::NEG_INFINITY);
    u.rows_mut(n_eq, n_in).copy_from(&p.b_in);
    l.rows_mut(n_eq + n_in, n).copy_from(&p.lower);
    u.rows_mut(n_eq + n_in, n).copy_from(&p.upper);
    Stacked { a, l, u, n_eq, n_in }
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn col_inf_norm(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).amax()
}

fn clamp_scale(v: f64) -> f64 {
    if v < SCALING_MIN {
        1.0
    } else {
        v.min(SCALING_MAX)
    }
}

/// Scales `p`, `q`, `a` in place and returns the accumulated factors.
fn equilibrate(p: &mut DMatrix<f64>, q: &mut DVector<f64>, a: &mut DMatrix<f64>, iters: usize) -> Scaling {
    let (m, n) = a.shape();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    for _ in 0..iters {
        let dk = DVector::from_fn(n, |j, _| {
            1.0 / clamp_scale(col_inf_norm(p, j).max(col_inf_norm(a, j))).sqrt()
        });
        let ek = DVector::from_fn(m, |i, _| 1.0 / clamp_scale(a.row(i).amax()).sqrt());
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dk[i] * dk[j];
            }
            for i in 0..m {
                a[(i, j)] *= ek[i] * dk[j];
            }
            q[j] *= dk[j];
        }
        d.component_mul_assign(&dk);
        e.component_mul_assign(&ek);

        let mean_p = (0..n).map(|j| col_inf_norm(p, j)).sum::<f64>() / n.max(1) as f64;
        let gamma = 1.0 / clamp_scale(mean_p.max(q.amax()));
        *p *= gamma;
        *q *= gamma;
        c *= gamma;
    }
    Scaling { d, e, c }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
            RHO_MIN
        } else if l[i] == u[i] {
            RHO_EQ_FACTOR * rho
        } else {
            rho
        }
    })
}

fn factor(p: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut ra = a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    let mut m = p + a.transpose() * ra;
    for i in 0..m.nrows() {
        m[(i, i)] += sigma;
    }
    m.cholesky()
}

/// Unscaled iterate with its residuals.
struct Candidate {
    x: DVector<f64>,
    y: DVector<f64>,
    primal_residual: f64,
    dual_residual: f64,
}

fn residuals(problem: &QpProblem, st: &Stacked, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let ax = &st.a * x;
    let mut prim: f64 = 0.0;
    for i in 0..ax.len() {
        prim = prim.max(st.l[i] - ax[i]).max(ax[i] - st.u[i]);
    }
    let dual = (&problem.p * x + &problem.q + st.a.transpose() * y).amax();
    (prim.max(0.0), dual)
}

fn finish(problem: &QpProblem, st: &Stacked, c: Candidate, status: QpStatus, iterations: usize, polished: bool) -> QpSolution {
    let (n_eq, n_in) = (st.n_eq, st.n_in);
    let objective = problem.objective(&c.x);
    QpSolution {
        dual_eq: c.y.rows(0, n_eq).into_owned(),
        dual_in: c.y.rows(n_eq, n_in).into_owned(),
        dual_box: c.y.rows(n_eq + n_in, problem.num_vars()).into_owned(),
        primal: c.x,
        status,
        primal_residual: c.primal_residual,
        dual_residual: c.dual_residual,
        objective,
        iterations,
        polished,
    }
}

pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    problem.validate()?;
    let st = stack(problem);
    let n = problem.num_vars();
    let m = st.a.nrows();

    let mut p = problem.p.clone();
    let mut q = problem.q.clone();
    let mut a = st.a.clone();
    let sc = equilibrate(&mut p, &mut q, &mut a, settings.scaling_iters);
    let l = st.l.component_mul(&sc.e);
    let u = st.u.component_mul(&sc.e);

    let unscale = |x: &DVector<f64>, y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        (x.component_mul(&sc.d), y.component_mul(&sc.e) / sc.c)
    };

    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&l, &u, rho);
    let Some(mut chol) = factor(&p, &a, &rho_vec, settings.sigma) else {
        return Ok(failed(problem, &st, 0));
    };

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    let mut last_sides: Option<Vec<Side>> = None;
    let mut best: Option<Candidate> = None;
    let alpha = settings.alpha;

    for iter in 1..=settings.max_iter {
        let rhs = &x * settings.sigma - &q + a.transpose() * (rho_vec.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &a * &x_tilde;
        let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let mut z_next = &z_relaxed + y.component_div(&rho_vec);
        for i in 0..m {
            z_next[i] = z_next[i].clamp(l[i], u[i]);
        }
        y += rho_vec.component_mul(&(&z_relaxed - &z_next));
        x = x_next;
        z = z_next;

        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Ok(failed(problem, &st, iter));
        }

        let at_check = iter % settings.check_interval == 0 || iter == settings.max_iter;
        if !at_check {
            continue;
        }

        let (xu, yu) = unscale(&x, &y);
        let (prim, dual) = residuals(problem, &st, &xu, &yu);
        let current = Candidate {
            x: xu,
            y: yu,
            primal_residual: prim,
            dual_residual: dual,
        };
        if prim <= settings.eps_primal && dual <= settings.eps_dual {
            return Ok(finish(problem, &st, current, QpStatus::Solved, iter, false));
        }

        let sides: Vec<Side> = (0..m)
            .map(|i| {
                if l[i] == u[i] || z[i] - l[i] < -y[i] {
                    Side::Lower
                } else if u[i] - z[i] < y[i] {
                    Side::Upper
                } else {
                    Side::Free
                }
            })
            .collect();
        if settings.polish && last_sides.as_ref() != Some(&sides) {
            last_sides = Some(sides.clone());
            if let Some((xp, yp)) = refine(problem, &st, &current.x, sides, settings) {
                let (primal_residual, dual_residual) = residuals(problem, &st, &xp, &yp);
                if primal_residual <= settings.eps_primal && dual_residual <= settings.eps_dual {
                    let pol = Candidate {
                        x: xp,
                        y: yp,
                        primal_residual,
                        dual_residual,
                    };
                    return Ok(finish(problem, &st, pol, QpStatus::Solved, iter, true));
                }
            }
        }

        let better = best
            .as_ref()
            .is_none_or(|b| prim.max(dual) < b.primal_residual.max(b.dual_residual));
        if better {
            best = Some(current);
        }

        // Step-size adaptation on the scaled residuals.
        let ax = &a * &x;
        let prim_s = (&ax - &z).amax() / ax.amax().max(z.amax()).max(1e-12);
        let aty = a.transpose() * &y;
        let px = &p * &x;
        let dual_s = (&px + &q + &aty).amax() / px.amax().max(aty.amax()).max(q.amax()).max(1e-12);
        let proposed = (rho * (prim_s / dual_s.max(1e-12)).sqrt()).clamp(RHO_MIN, RHO_MAX);
        if proposed > 5.0 * rho || proposed < 0.2 * rho {
            rho = proposed;
            rho_vec = rho_vector(&l, &u, rho);
            match factor(&p, &a, &rho_vec, settings.sigma) {
                Some(c) => chol = c,
                None => return Ok(failed(problem, &st, iter)),
            }
        }
    }

    let best = best.expect("at least one residual check runs");
    Ok(finish(problem, &st, best, QpStatus::MaxIter, settings.max_iter, false))
}

fn failed(problem: &QpProblem, st: &Stacked, iterations: usize) -> QpSolution {
    let n = problem.num_vars();
    let x = DVector::zeros(n);
    let y = DVector::zeros(st.a.nrows());
    let (p, d) = residuals(problem, st, &x, &y);
    finish(
        problem,
        st,
        Candidate {
            x,
            y,
            primal_residual: p,
            dual_residual: d,
        },
        QpStatus::InfeasibleNumerics,
        iterations,
        false,
    )
}
