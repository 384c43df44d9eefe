//! Finite-difference and enumeration oracles used by the self-check commands
//! and the test suites.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{default_kernels, GpDynamics};
use crate::entropy::{covariance_input_jacobian, entropy, entropy_gradient};
use crate::error::Result;
use crate::gp::{build_model, kernel_eval, kernel_input_jacobian, mean_gradient, predict, GpModel, KernelParams};
use crate::qp::{kkt_residuals, solve_qp, QpProblem, QpSettings, QpStatus};
use crate::rhalc::{build_subproblem, simulate_gp_rollout, ControlBounds, Corridor, ObjectiveWeights, Penalties, RhalcProblem};
use crate::scp::{run_scp, ConvexModel, ModelStep, ScpConfig};
use crate::vehicle::{step_truth, ControlInput, StepObservation, VehicleParams, VehicleState};

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖b‖₂, 1e-10)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-10)
}

/// Global minimizer of `½zᵀPz + qᵀz` over a box by enumerating every
/// lower/free/upper pattern. `P` must be positive definite.
///
/// Patterns whose free block violates the box or whose bound multipliers have
/// the wrong sign are screened out; the best remaining point is returned.
pub fn box_qp_enumeration(p: &DMatrix<f64>, q: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = q.len();
    assert!(n <= 16, "enumeration is exponential in the variable count");
    let total = 3usize.pow(n as u32);
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut pattern = vec![0u8; n];
    for code in 0..total {
        let mut c = code;
        for slot in pattern.iter_mut() {
            *slot = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 1).collect();
        let mut z = DVector::zeros(n);
        for i in 0..n {
            match pattern[i] {
                0 => z[i] = lower[i],
                2 => z[i] = upper[i],
                _ => {}
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            continue;
        }
        if !free.is_empty() {
            let pff = DMatrix::from_fn(free.len(), free.len(), |a, b| p[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                let i = free[a];
                -q[i] - (0..n).filter(|j| pattern[*j] != 1).map(|j| p[(i, j)] * z[j]).sum::<f64>()
            });
            let Some(chol) = pff.cholesky() else { continue };
            let zf = chol.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                z[i] = zf[a];
            }
            if free.iter().any(|&i| z[i] < lower[i] - 1e-12 || z[i] > upper[i] + 1e-12) {
                continue;
            }
        }
        let grad = p * &z + q;
        let signs_ok = (0..n).all(|i| match pattern[i] {
            0 => grad[i] >= -1e-9,
            2 => grad[i] <= 1e-9,
            _ => true,
        });
        if !signs_ok {
            continue;
        }
        let f = 0.5 * z.dot(&(p * &z)) + q.dot(&z);
        if best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((z, f));
        }
    }
    best.expect("a strictly convex box QP has a KKT point")
}


/// Result of one oracle comparison over a batch of random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    /// Largest error over the batch (relative or absolute, see `tolerance`).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let worst = errors.iter().copied().fold(0.0, f64::max);
        Self {
            name: name.to_string(),
            instances: errors.len(),
            worst,
            tolerance,
            passed: errors.iter().all(|e| *e <= tolerance),
        }
    }
}

const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Random GP over `n`-dimensional inputs with `points` noisy samples of a
/// smooth function.
pub fn random_gp<R: Rng + ?Sized>(rng: &mut R, n: usize, points: usize) -> Result<GpModel> {
    let inputs = DMatrix::from_fn(n, points, |_, _| rng.random_range(-1.0..1.0));
    let targets = DVector::from_fn(points, |j, _| {
        let c = inputs.column(j);
        c.iter().enumerate().map(|(d, v)| ((d + 1) as f64 * v).sin()).sum::<f64>() + 0.01 * rng.random_range(-1.0..1.0)
    });
    let lengthscales = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let kernel = KernelParams::new(rng.random_range(0.5..2.0), lengthscales, rng.random_range(1e-3..1e-2))?;
    build_model(inputs, targets, kernel)
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Compares the analytic mean gradient, kernel input Jacobian, covariance
/// input Jacobian and entropy gradient with central differences on
/// `instances` random models (`points` training inputs of dimension `n`,
/// query sets of `h` inputs).
pub fn gradient_suite(instances: usize, n: usize, points: usize, h: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = [vec![], vec![], vec![], vec![]];
    for _ in 0..instances {
        let model = random_gp(&mut rng, n, points)?;
        let xset = DMatrix::from_fn(n, h, |_, _| rng.random_range(-1.2..1.2));
        let x0: Vec<f64> = xset.column(0).iter().copied().collect();

        let analytic = mean_gradient(&model, &x0)?;
        let fd = central_difference(|x| model.predict_mean(x).expect("valid input"), &x0, FD_STEP);
        errs[0].push(relative_error(analytic.as_slice(), &fd));

        let jac = kernel_input_jacobian(model.kernel(), &x0, model.inputs())?;
        let mut fd_jac = DMatrix::zeros(n, points);
        for i in 0..points {
            let xi: Vec<f64> = model.inputs().column(i).iter().copied().collect();
            let g = central_difference(|x| kernel_eval(model.kernel(), x, &xi).expect("valid input"), &x0, FD_STEP);
            fd_jac.column_mut(i).copy_from_slice(&g);
        }
        errs[1].push(relative_error(&flat(&jac), &flat(&fd_jac)));

        let nu: Vec<f64> = xset.iter().copied().collect();
        let at = |v: &[f64]| DMatrix::from_column_slice(n, h, v);
        let mut analytic_cov = Vec::new();
        let mut fd_cov = Vec::new();
        for j in 0..n * h {
            analytic_cov.extend(flat(&covariance_input_jacobian(&model, &xset, j)?));
            let mut up = nu.clone();
            let mut down = nu.clone();
            up[j] += FD_STEP;
            down[j] -= FD_STEP;
            let cu = predict(&model, &at(&up))?.covariance;
            let cd = predict(&model, &at(&down))?.covariance;
            fd_cov.extend(flat(&((cu - cd) / (2.0 * FD_STEP))));
        }
        errs[2].push(relative_error(&analytic_cov, &fd_cov));

        let grad = entropy_gradient(&model, &xset)?;
        let fd = central_difference(|v| entropy(&model, &at(v)).expect("valid input"), &nu, FD_STEP);
        errs[3].push(relative_error(grad.as_slice(), &fd));
    }
    let names = ["mean_gradient", "kernel_input_jacobian", "covariance_input_jacobian", "entropy_gradient"];
    Ok(names
        .iter()
        .zip(errs.iter())
        .map(|(name, e)| CheckOutcome::new(name, e, GRADIENT_TOLERANCE))
        .collect())
}

/// Random strictly convex box QP with `n` variables.
pub fn random_box_qp<R: Rng + ?Sized>(rng: &mut R, n: usize) -> QpProblem {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut p = a.transpose() * a;
    for i in 0..n {
        p[(i, i)] += 0.1;
    }
    let q = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lower = DVector::from_fn(n, |_, _| rng.random_range(-1.0..0.0));
    let upper = DVector::from_fn(n, |i, _| lower[i] + rng.random_range(0.1..1.5));
    QpProblem::box_constrained(p, q, lower, upper)
}

/// Subproblems of the receding-horizon problem around random warm starts,
/// with models trained on simulated data. Half use the information term.
pub fn random_subproblems<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Result<Vec<QpProblem>> {
    let params = VehicleParams::default();
    let mut obs: Vec<StepObservation> = Vec::new();
    let mut s = VehicleState::new(0.0, 0.0, 0.0, 1.0);
    for _ in 0..40 {
        let u = ControlInput::new(rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6));
        let u = ControlBounds::default().speed_feasible(&[u], s.v, 0.2)[0];
        let (next, o) = step_truth(&s, &u, 0.2, &params)?;
        obs.push(o);
        s = next;
    }
    let models = GpDynamics::from_observations(&obs, default_kernels())?;
    let bounds = ControlBounds::default();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let h = 5;
        let initial = VehicleState::new(0.0, 0.0, rng.random_range(-3.0..3.0), rng.random_range(0.2..1.8));
        let warm: Vec<ControlInput> = (0..h)
            .map(|_| ControlInput::new(rng.random_range(-2.0..2.0), rng.random_range(-0.78..0.78)))
            .collect();
        let warm = bounds.speed_feasible(&warm, initial.v, 0.2);
        let plan = simulate_gp_rollout(&models, &warm, &initial, 0.2);
        let reference = (1..=h).map(|k| [0.3 * k as f64, 0.0]).collect();
        let problem = RhalcProblem {
            models: &models,
            initial,
            reference,
            corridor: Corridor::axis_box(h, [-0.5, 2.0], [-0.3, 0.3]),
            weights: ObjectiveWeights {
                gamma: if i % 2 == 0 { 0.0 } else { 10.0 },
                ..ObjectiveWeights::default()
            },
            bounds,
            penalties: Penalties::default(),
            dt: 0.2,
        };
        out.push(build_subproblem(&problem, &plan, rng.random_range(0.01..0.5))?.qp);
    }
    Ok(out)
}

pub const QP_OBJECTIVE_TOLERANCE: f64 = 1e-5;
pub const KKT_TOLERANCE: f64 = 1e-6;

/// Box QPs against exhaustive active-set enumeration, and KKT residuals of
/// solved receding-horizon subproblems.
pub fn qp_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = QpSettings::default();
    let mut objective_errs = Vec::new();
    for _ in 0..instances {
        let qp = random_box_qp(&mut rng, 10);
        let (_, best) = box_qp_enumeration(&qp.p, &qp.q, &qp.lower, &qp.upper);
        let sol = solve_qp(&qp, &settings)?;
        let err = if sol.status == QpStatus::Solved { (sol.objective - best).abs() } else { f64::INFINITY };
        objective_errs.push(err);
    }
    let mut kkt = Vec::new();
    for qp in random_subproblems(&mut rng, instances)? {
        let sol = solve_qp(&qp, &settings)?;
        kkt.push(if sol.status == QpStatus::Solved { kkt_residuals(&qp, &sol).max() } else { f64::INFINITY });
    }
    Ok(vec![
        CheckOutcome::new("box_qp_enumeration", &objective_errs, QP_OBJECTIVE_TOLERANCE),
        CheckOutcome::new("subproblem_kkt", &kkt, KKT_TOLERANCE),
    ])
}

/// `(u − 2)⁴` on `[−5, 5]` with its exact second-order model, a scalar
/// problem with a degenerate minimum for exercising the trust-region loop.
pub struct QuarticModel;

impl ConvexModel for QuarticModel {
    type Iterate = f64;

    fn exact_cost(&self, u: &f64) -> Result<f64> {
        Ok((u - 2.0).powi(4))
    }

    fn solve_model(&self, u: &f64, rho: f64) -> Result<Option<ModelStep<f64>>> {
        let (f, g, c) = ((u - 2.0).powi(4), 4.0 * (u - 2.0).powi(3), 12.0 * (u - 2.0).powi(2));
        let (lo, hi) = ((-rho).max(-5.0 - u), rho.min(5.0 - u));
        let d = if c > 0.0 { (-g / c).clamp(lo, hi) } else if g > 0.0 { lo } else { hi };
        Ok(Some(ModelStep {
            iterate: u + d,
            predicted_cost: f + g * d + 0.5 * c * d * d,
            qp_iterations: 0,
            kkt_residual: 0.0,
        }))
    }
}

/// Distance between the SCP solution of [`QuarticModel`] from `u0` and the
/// grid-search minimizer on a 1e-4 grid.
pub fn quartic_check(u0: f64, config: &ScpConfig) -> Result<f64> {
    let (u, _) = run_scp(&QuarticModel, u0, config, &[])?;
    let grid = (0..=100_000)
        .map(|i| -5.0 + i as f64 * 1e-4)
        .min_by(|a, b| (a - 2.0).powi(4).total_cmp(&(b - 2.0).powi(4)))
        .expect("non-empty grid");
    Ok((u - grid).abs())
}

pub const DENSE_TOLERANCE: f64 = 1e-9;
pub const INTERPOLATION_TOLERANCE: f64 = 1e-5;

/// Posterior mean and covariance against the textbook formulas evaluated with
/// an LU inverse of the dense noisy Gram matrix, and interpolation of the
/// training targets by nearly noise-free models.
pub fn gp_exactness_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dense, mut interp) = (Vec::new(), Vec::new());
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let points = rng.random_range(3..=25);
        let model = random_gp(&mut rng, n, points)?;
        let k = model.kernel();
        let x = model.inputs();
        let xs = DMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.5..1.5));
        let col = |m: &DMatrix<f64>, j: usize| m.column(j).iter().copied().collect::<Vec<_>>();
        let mut gram = DMatrix::zeros(points, points);
        for i in 0..points {
            for j in 0..points {
                gram[(i, j)] = kernel_eval(k, &col(x, i), &col(x, j))?;
            }
            gram[(i, i)] += k.noise_variance;
        }
        let mut ks = DMatrix::zeros(4, points);
        let mut kss = DMatrix::zeros(4, 4);
        for a in 0..4 {
            for i in 0..points {
                ks[(a, i)] = kernel_eval(k, &col(&xs, a), &col(x, i))?;
            }
            for b in 0..4 {
                kss[(a, b)] = kernel_eval(k, &col(&xs, a), &col(&xs, b))?;
            }
        }
        let inv = gram.lu().try_inverse().expect("noisy Gram matrix is invertible");
        let mean = &ks * &inv * model.targets();
        let cov = kss - &ks * &inv * ks.transpose();
        let p = predict(&model, &xs)?;
        dense.push((p.mean - mean).amax().max((p.covariance - cov).amax()));

        // well-separated inputs keep the noise-free Gram matrix well conditioned
        let m = rng.random_range(2..=4);
        let xi = DMatrix::from_fn(m, 10, |_, _| rng.random_range(-1.0..1.0));
        let yi = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let sharp = KernelParams::new(rng.random_range(0.5..2.0), vec![0.3; m], 1e-10)?;
        let fit = predict(&build_model(xi.clone(), yi.clone(), sharp)?, &xi)?;
        interp.push((fit.mean - yi).amax());
    }
    Ok(vec![
        CheckOutcome::new("dense_posterior", &dense, DENSE_TOLERANCE),
        CheckOutcome::new("training_interpolation", &interp, INTERPOLATION_TOLERANCE),
    ])
}
