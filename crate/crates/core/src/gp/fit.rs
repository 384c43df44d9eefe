//! Type-II maximum likelihood for the kernel hyperparameters.
//!
//! The optimizer works on `[ln σ_f, ln ℓ_1 .. ln ℓ_n, ln σ_n]` inside a box and
//! runs a projected BFGS iteration with Armijo backtracking. Restarts after
//! the first are drawn uniformly within one decade of the initial point.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cholesky_with_jitter, cross_covariance, KernelParams};
use crate::error::{Error, Result};

/// Box bounds on the standard deviations / lengthscales (not variances).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperparameterBounds {
    pub lengthscale: [f64; 2],
    pub signal_std: [f64; 2],
    pub noise_std: [f64; 2],
}

impl Default for HyperparameterBounds {
    fn default() -> Self {
        Self {
            lengthscale: [1e-3, 1e3],
            signal_std: [1e-4, 1e2],
            noise_std: [1e-6, 1e1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub bounds: HyperparameterBounds,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            bounds: HyperparameterBounds::default(),
        }
    }
}

fn to_log(p: &KernelParams) -> DVector<f64> {
    let n = p.dim();
    let mut v = DVector::zeros(n + 2);
    v[0] = 0.5 * p.signal_variance.ln();
    for (d, l) in p.lengthscales.iter().enumerate() {
        v[1 + d] = l.ln();
    }
    v[n + 1] = 0.5 * p.noise_variance.ln();
    v
}

fn from_log(v: &DVector<f64>) -> KernelParams {
    let n = v.len() - 2;
    KernelParams {
        signal_variance: (2.0 * v[0]).exp(),
        lengthscales: (0..n).map(|d| v[1 + d].exp()).collect(),
        noise_variance: (2.0 * v[n + 1]).exp(),
    }
}

fn log_box(bounds: &HyperparameterBounds, n: usize) -> (DVector<f64>, DVector<f64>) {
    let mut lo = DVector::zeros(n + 2);
    let mut hi = DVector::zeros(n + 2);
    lo[0] = bounds.signal_std[0].ln();
    hi[0] = bounds.signal_std[1].ln();
    for d in 0..n {
        lo[1 + d] = bounds.lengthscale[0].ln();
        hi[1 + d] = bounds.lengthscale[1].ln();
    }
    lo[n + 1] = bounds.noise_std[0].ln();
    hi[n + 1] = bounds.noise_std[1].ln();
    (lo, hi)
}

fn project(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().zip(lo.iter().zip(hi.iter())).map(|(v, (l, h))| v.clamp(*l, *h)))
}

/// `−ln p(Y | X, θ)` for the zero-mean GP.
pub fn negative_log_likelihood(inputs: &DMatrix<f64>, targets: &DVector<f64>, params: &KernelParams) -> f64 {
    nll_and_gradient(inputs, targets, params, false).map_or(f64::INFINITY, |(f, _)| f)
}

/// NLL and, optionally, its gradient with respect to the log parameters.
fn nll_and_gradient(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    params: &KernelParams,
    with_gradient: bool,
) -> Option<(f64, DVector<f64>)> {
    let n = params.dim();
    let count = inputs.ncols();
    let k = cross_covariance(params, inputs, inputs);
    let mut gram = k.clone();
    for i in 0..count {
        gram[(i, i)] += params.noise_variance;
    }
    let (chol, _) = cholesky_with_jitter(&gram)?;
    let alpha = chol.solve(targets);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let nll = 0.5 * targets.dot(&alpha) + 0.5 * log_det + 0.5 * count as f64 * (2.0 * std::f64::consts::PI).ln();
    if !nll.is_finite() {
        return None;
    }
    if !with_gradient {
        return Some((nll, DVector::zeros(0)));
    }

    // ∂NLL/∂θ = ½ tr((C⁻¹ − ααᵀ) ∂C/∂θ)
    let mut w = chol.inverse();
    w -= &alpha * alpha.transpose();
    let mut grad = DVector::zeros(n + 2);
    let mut g_signal = 0.0;
    let mut g_noise = 0.0;
    let mut g_len = vec![0.0; n];
    for j in 0..count {
        let xj = inputs.column(j);
        for i in 0..count {
            let wk = w[(i, j)] * k[(i, j)];
            g_signal += wk;
            if i != j {
                let xi = inputs.column(i);
                for d in 0..n {
                    let l = params.lengthscales[d];
                    let diff = (xi[d] - xj[d]) / l;
                    g_len[d] += wk * diff * diff;
                }
            }
        }
        g_noise += w[(j, j)];
    }
    grad[0] = g_signal; // ½ · tr(W · 2K)
    for d in 0..n {
        grad[1 + d] = 0.5 * g_len[d];
    }
    grad[n + 1] = g_noise * params.noise_variance;
    if grad.iter().all(|g| g.is_finite()) {
        Some((nll, grad))
    } else {
        None
    }
}

struct Optimum {
    x: DVector<f64>,
    f: f64,
}

fn projected_bfgs(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    start: DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &FitOptions,
) -> Option<Optimum> {
    let dim = start.len();
    let eval = |x: &DVector<f64>| nll_and_gradient(inputs, targets, &from_log(x), true);
    let mut x = project(&start, lo, hi);
    let (mut f, mut g) = eval(&x)?;
    let mut hinv = DMatrix::<f64>::identity(dim, dim);

    for _ in 0..opts.max_iterations {
        let pg = &x - project(&(&x - &g), lo, hi);
        if pg.amax() < opts.gradient_tolerance {
            break;
        }
        // Coordinates pinned at a bound with the gradient pushing outward stay fixed.
        let free: Vec<bool> = (0..dim)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let mut dir = DVector::zeros(dim);
        for i in 0..dim {
            if free[i] {
                for j in 0..dim {
                    if free[j] {
                        dir[i] -= hinv[(i, j)] * g[j];
                    }
                }
            }
        }
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(dim, dim);
            dir = DVector::from_fn(dim, |i, _| if free[i] { -g[i] } else { 0.0 });
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = project(&(&x + &dir * step), lo, hi);
            let s = &trial - &x;
            if s.amax() < 1e-14 {
                break;
            }
            if let Some((ft, gt)) = eval(&trial) {
                if ft <= f + 1e-4 * g.dot(&s) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(dim, dim);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        let improvement = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        if improvement.abs() < 1e-10 * (1.0 + f.abs()) {
            break;
        }
    }
    Some(Optimum { x, f })
}

/// Maximizes the marginal likelihood from `init` plus `restarts − 1` random starts.
///
/// The result never has a larger negative log likelihood than `init` itself.
pub fn fit_hyperparameters<R: Rng + ?Sized>(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    init: &KernelParams,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<KernelParams> {
    init.validate()?;
    if inputs.nrows() != init.dim() || inputs.ncols() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "inputs {}×{}, targets {}, kernel dim {}",
            inputs.nrows(),
            inputs.ncols(),
            targets.len(),
            init.dim()
        )));
    }
    if inputs.ncols() < 2 {
        return Err(Error::Domain("hyperparameter fitting needs at least two observations".into()));
    }
    let n = init.dim();
    let (lo, hi) = log_box(&opts.bounds, n);
    let x0 = to_log(init);
    let init_nll = negative_log_likelihood(inputs, targets, init);

    let mut best: Option<Optimum> = None;
    let starts = opts.restarts.max(1);
    for r in 0..starts {
        let start = if r == 0 {
            x0.clone()
        } else {
            let spread = std::f64::consts::LN_10;
            let jittered = DVector::from_fn(n + 2, |i, _| x0[i] + rng.random_range(-spread..spread));
            project(&jittered, &lo, &hi)
        };
        if let Some(opt) = projected_bfgs(inputs, targets, start, &lo, &hi, opts) {
            if best.as_ref().is_none_or(|b| opt.f < b.f) {
                best = Some(opt);
            }
        }
    }
    match best {
        Some(b) if b.f <= init_nll || !init_nll.is_finite() => Ok(from_log(&b.x)),
        Some(_) => Ok(init.clone()),
        None => Err(Error::FittingFailed { best: init.clone() }),
    }
}
