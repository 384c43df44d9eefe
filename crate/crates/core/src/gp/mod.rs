//! Exact Gaussian-process regression with a zero prior mean.
//!
//! A [`GpModel`] owns its training data together with the Cholesky factor of
//! `K + σ_n² I` and the weight vector `(K + σ_n² I)⁻¹ Y`, so prediction and
//! gradient queries never refactorize. Models are immutable; adding data
//! produces a new model.

mod fit;
mod io;
mod kernel;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub use fit::{fit_hyperparameters, negative_log_likelihood, FitOptions, HyperparameterBounds};
pub use io::{load_model, save_model, GpModelFile};
pub use kernel::{kernel_eval, kernel_input_jacobian, KernelParams};

pub(crate) use kernel::{cross_covariance, kernel_input_jacobian_unchecked};
use crate::error::{Error, Result};

/// Diagonal jitter ladder tried in order until the factorization succeeds.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Factorizes `m + jitter·I`, escalating jitter from zero through [`JITTER_LADDER`].
pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some((c, 0.0));
    }
    for &jitter in &JITTER_LADDER {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Some((c, jitter));
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    kernel: KernelParams,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
}

/// Joint predictive distribution of the latent function at M query inputs.
#[derive(Debug, Clone)]
pub struct GpPrediction {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GpModel {
    /// The prior model: no data, mean zero, covariance `K★★`.
    pub fn prior(kernel: KernelParams) -> Self {
        let n = kernel.dim();
        Self {
            inputs: DMatrix::zeros(n, 0),
            targets: DVector::zeros(0),
            kernel,
            chol: None,
            alpha: DVector::zeros(0),
            jitter: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training inputs, one column per observation.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Jitter that was added to the diagonal to make the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular Cholesky factor of `K + σ_n² I (+ jitter I)`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c.l(),
            None => DMatrix::zeros(0, 0),
        }
    }

    /// `K + σ_n² I` without the jitter.
    pub fn noisy_gram(&self) -> DMatrix<f64> {
        let mut k = cross_covariance(&self.kernel, &self.inputs, &self.inputs);
        for i in 0..k.nrows() {
            k[(i, i)] += self.kernel.noise_variance;
        }
        k
    }

    /// Solves `(K + σ_n² I) X = rhs` with the cached factor.
    pub(crate) fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c.solve(rhs),
            None => DMatrix::zeros(0, rhs.ncols()),
        }
    }

    /// Solves `L X = rhs` with the lower Cholesky factor.
    pub(crate) fn solve_lower(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c
                .l_dirty()
                .solve_lower_triangular(rhs)
                .expect("Cholesky factor has a positive diagonal"),
            None => DMatrix::zeros(0, rhs.ncols()),
        }
    }

    /// Solves `Lᵀ X = rhs` with the lower Cholesky factor.
    pub(crate) fn solve_upper_transpose(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c
                .l_dirty()
                .tr_solve_lower_triangular(rhs)
                .expect("Cholesky factor has a positive diagonal"),
            None => DMatrix::zeros(0, rhs.ncols()),
        }
    }

    /// Same data, different hyperparameters.
    pub fn with_kernel(&self, kernel: KernelParams) -> Result<Self> {
        build_model(self.inputs.clone(), self.targets.clone(), kernel)
    }

    /// Appends one observation and refactorizes.
    pub fn with_observation(&self, x: &[f64], y: f64) -> Result<Self> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "observation has {} inputs, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n = self.len();
        let inputs = self.inputs.clone().insert_column(n, 0.0);
        let mut inputs = inputs;
        inputs.column_mut(n).copy_from_slice(x);
        let targets = self.targets.clone().insert_row(n, y);
        build_model(inputs, targets, self.kernel.clone())
    }

    fn check_query(&self, xstar: &DMatrix<f64>) -> Result<()> {
        if xstar.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "query inputs have {} rows, model expects {}",
                xstar.nrows(),
                self.input_dim()
            )));
        }
        if xstar.ncols() == 0 {
            return Err(Error::DimensionMismatch("at least one query input required".into()));
        }
        Ok(())
    }

    /// Predictive mean at a single input.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} entries, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(self.mean_unchecked(x))
    }

    #[inline]
    pub(crate) fn mean_unchecked(&self, x: &[f64]) -> f64 {
        self.inputs
            .column_iter()
            .zip(self.alpha.iter())
            .map(|(col, a)| self.kernel.eval_unchecked(x, col.as_slice()) * a)
            .sum()
    }

    /// Predictive means at the columns of `xstar` without forming the covariance.
    pub fn predict_means(&self, xstar: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_query(xstar)?;
        Ok(DVector::from_iterator(
            xstar.ncols(),
            xstar.column_iter().map(|c| self.mean_unchecked(c.as_slice())),
        ))
    }
}

/// Factorizes `K + σ_n² I` and caches `α = (K + σ_n² I)⁻¹ Y`.
pub fn build_model(inputs: DMatrix<f64>, targets: DVector<f64>, kernel: KernelParams) -> Result<GpModel> {
    kernel.validate()?;
    if inputs.nrows() != kernel.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} rows, kernel has {} lengthscales",
            inputs.nrows(),
            kernel.dim()
        )));
    }
    if inputs.ncols() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} targets",
            inputs.ncols(),
            targets.len()
        )));
    }
    if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("training data contains non-finite values".into()));
    }
    if inputs.ncols() == 0 {
        return Ok(GpModel::prior(kernel));
    }
    let mut gram = cross_covariance(&kernel, &inputs, &inputs);
    for i in 0..gram.nrows() {
        gram[(i, i)] += kernel.noise_variance;
    }
    let (chol, jitter) = cholesky_with_jitter(&gram).ok_or(Error::SingularKernel {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })?;
    let alpha = chol.solve(&targets);
    Ok(GpModel {
        inputs,
        targets,
        kernel,
        chol: Some(chol),
        alpha,
        jitter,
    })
}

/// Builds a model from row-major point lists (one `Vec` per observation).
pub fn build_model_from_points(points: &[Vec<f64>], targets: &[f64], kernel: KernelParams) -> Result<GpModel> {
    let n = kernel.dim();
    if points.iter().any(|p| p.len() != n) {
        return Err(Error::DimensionMismatch(format!("every point must have {n} entries")));
    }
    let inputs = DMatrix::from_fn(n, points.len(), |d, j| points[j][d]);
    build_model(inputs, DVector::from_column_slice(targets), kernel)
}

/// Joint posterior mean and covariance at the columns of `xstar`.
pub fn predict(model: &GpModel, xstar: &DMatrix<f64>) -> Result<GpPrediction> {
    model.check_query(xstar)?;
    let kss = cross_covariance(&model.kernel, xstar, xstar);
    if model.is_empty() {
        return Ok(GpPrediction {
            mean: DVector::zeros(xstar.ncols()),
            covariance: kss,
        });
    }
    let ks = cross_covariance(&model.kernel, xstar, &model.inputs);
    let mean = &ks * &model.alpha;
    let v = model.solve_lower(&ks.transpose());
    let mut covariance = kss - v.transpose() * v;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(GpPrediction { mean, covariance })
}

/// `∇μ(x★) = K^(1,0)(x★, X) α`, the gradient of the predictive mean.
pub fn mean_gradient(model: &GpModel, xstar: &[f64]) -> Result<DVector<f64>> {
    if xstar.len() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} entries, model expects {}",
            xstar.len(),
            model.input_dim()
        )));
    }
    if model.is_empty() {
        return Ok(DVector::zeros(xstar.len()));
    }
    Ok(kernel_input_jacobian_unchecked(&model.kernel, xstar, &model.inputs) * &model.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, n: usize, count: usize) -> GpModel {
        let inputs = DMatrix::from_fn(n, count, |_, _| rng.random_range(-2.0..2.0));
        let targets = DVector::from_fn(count, |_, _| rng.random_range(-1.0..1.0));
        let ls = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        build_model(inputs, targets, KernelParams::new(1.2, ls, 0.05).unwrap()).unwrap()
    }

    #[test]
    fn empty_data_gives_prior() {
        let k = KernelParams::new(2.0, vec![1.0], 0.1).unwrap();
        let model = build_model(DMatrix::zeros(1, 0), DVector::zeros(0), k).unwrap();
        let xs = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let p = predict(&model, &xs).unwrap();
        assert_eq!(p.mean, DVector::zeros(2));
        assert_eq!(p.covariance[(0, 0)], 2.0);
        assert!((p.covariance[(0, 1)] - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_point_alpha_is_scalar_solve() {
        let k = KernelParams::new(1.5, vec![0.7, 0.3], 0.2).unwrap();
        let model = build_model_from_points(&[vec![0.1, 0.2]], &[0.9], k).unwrap();
        assert!((model.alpha()[0] - 0.9 / (1.5 + 0.2)).abs() < 1e-14);
    }

    #[test]
    fn factor_reconstructs_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 3, 5);
        let l = model.chol_factor();
        let gram = model.noisy_gram();
        let err = (&l * l.transpose() - &gram).norm() / gram.norm();
        assert!(err < 1e-8, "relative reconstruction error {err}");
        let resid = (&gram * model.alpha() - model.targets()).norm() / model.targets().norm();
        assert!(resid < 1e-6);
    }

    #[test]
    fn interpolates_noise_free_training_targets() {
        let k = KernelParams::new(1.0, vec![0.8], 1e-12).unwrap();
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.9]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[0].sin()).collect();
        let model = build_model_from_points(&pts, &ys, k).unwrap();
        for (p, y) in pts.iter().zip(&ys) {
            assert!((model.predict_mean(p).unwrap() - y).abs() < 1e-5);
        }
    }

    #[test]
    fn single_query_variance_is_bounded_by_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 2, 8);
        for _ in 0..20 {
            let x = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-3.0..3.0));
            let var = predict(&model, &x).unwrap().covariance[(0, 0)];
            assert!(var >= -1e-12 && var <= model.kernel().signal_variance + 1e-12);
        }
    }

    #[test]
    fn matches_dense_formula_without_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(&mut rng, 2, 3);
        let xs = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let p = predict(&model, &xs).unwrap();
        let ks = cross_covariance(model.kernel(), &xs, model.inputs());
        let kss = cross_covariance(model.kernel(), &xs, &xs);
        let inv = model.noisy_gram().try_inverse().unwrap();
        let mean = &ks * &inv * model.targets();
        let cov = kss - &ks * &inv * ks.transpose();
        assert!((p.mean - mean).amax() < 1e-9);
        assert!((p.covariance - cov).amax() < 1e-9);
    }

    #[test]
    fn gradient_at_lone_training_point_vanishes() {
        let k = KernelParams::new(1.0, vec![0.5, 0.5], 0.01).unwrap();
        let model = build_model_from_points(&[vec![0.3, -0.2]], &[1.0], k).unwrap();
        let g = mean_gradient(&model, &[0.3, -0.2]).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.amax() < 1e-15);
    }

    #[test]
    fn query_dimension_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 2, 4);
        assert!(predict(&model, &DMatrix::zeros(3, 1)).is_err());
        assert!(predict(&model, &DMatrix::zeros(2, 0)).is_err());
        assert!(mean_gradient(&model, &[0.0]).is_err());
    }

    #[test]
    fn duplicate_inputs_with_tiny_noise_need_jitter() {
        let k = KernelParams::new(1.0, vec![1.0], 1e-20).unwrap();
        let model = build_model_from_points(&[vec![0.0], vec![0.0], vec![0.0]], &[1.0, 1.0, 1.0], k).unwrap();
        assert!(model.jitter() > 0.0);
    }

    #[test]
    fn adding_observation_grows_dataset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 2, 4);
        let bigger = model.with_observation(&[0.5, 0.5], 0.3).unwrap();
        assert_eq!(bigger.len(), 5);
        assert_eq!(bigger.inputs().column(4).as_slice(), &[0.5, 0.5]);
        assert!(model.with_observation(&[0.5], 0.3).is_err());
    }
}
