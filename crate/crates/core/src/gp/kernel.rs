//! Squared-exponential covariance with one lengthscale per input dimension.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the squared-exponential ARD kernel plus the observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let params = Self {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        params.validate()?;
        Ok(params)
    }

    /// Isotropic parameters for an `dim`-dimensional input.
    pub fn isotropic(dim: usize, signal_variance: f64, lengthscale: f64, noise_variance: f64) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; dim], noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.signal_variance) || !positive(self.noise_variance) {
            return Err(Error::Domain(format!(
                "kernel variances must be positive (signal {}, noise {})",
                self.signal_variance, self.noise_variance
            )));
        }
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| positive(l)) {
            return Err(Error::Domain(format!(
                "lengthscales must be non-empty and positive: {:?}",
                self.lengthscales
            )));
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} entries, kernel expects {}",
                len,
                self.dim()
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((a, b), l) in x.iter().zip(x2).zip(&self.lengthscales) {
            let d = (a - b) / l;
            r2 += d * d;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// `σ_f² exp(−½ Σ_d (x_d − x2_d)² / ℓ_d²)`.
pub fn kernel_eval(params: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    params.check_dim(x.len())?;
    params.check_dim(x2.len())?;
    Ok(params.eval_unchecked(x, x2))
}

/// Covariance between the columns of `a` (n×M) and `b` (n×N), returned as M×N.
pub(crate) fn cross_covariance(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| {
        params.eval_unchecked(a.column(i).as_slice(), b.column(j).as_slice())
    })
}

/// Derivatives of `k(x★, x⁽ʲ⁾)` with respect to `x★`, one column per training input.
///
/// For the SE kernel `∂k/∂x★_d = −(x★_d − x_d)/ℓ_d² · k(x★, x)`.
pub fn kernel_input_jacobian(params: &KernelParams, xstar: &[f64], inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    params.check_dim(xstar.len())?;
    params.check_dim(inputs.nrows())?;
    Ok(kernel_input_jacobian_unchecked(params, xstar, inputs))
}

pub(crate) fn kernel_input_jacobian_unchecked(
    params: &KernelParams,
    xstar: &[f64],
    inputs: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = xstar.len();
    let mut jac = DMatrix::zeros(n, inputs.ncols());
    for j in 0..inputs.ncols() {
        let col = inputs.column(j);
        let k = params.eval_unchecked(xstar, col.as_slice());
        for d in 0..n {
            let l = params.lengthscales[d];
            jac[(d, j)] = -(xstar[d] - col[d]) / (l * l) * k;
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_1d() -> KernelParams {
        KernelParams::new(1.0, vec![1.0], 0.01).unwrap()
    }

    #[test]
    fn zero_distance_returns_signal_variance() {
        let p = KernelParams::new(2.5, vec![0.3, 4.0], 0.1).unwrap();
        let x = [0.7, -1.2];
        assert_eq!(kernel_eval(&p, &x, &x).unwrap(), 2.5);
    }

    #[test]
    fn unit_distance_closed_form() {
        let v = kernel_eval(&params_1d(), &[0.0], &[1.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn symmetric_in_arguments() {
        let p = KernelParams::new(1.3, vec![0.5, 2.0, 1.0], 0.1).unwrap();
        let a = [0.1, -0.4, 2.0];
        let b = [1.1, 0.3, -0.5];
        assert_eq!(kernel_eval(&p, &a, &b).unwrap(), kernel_eval(&p, &b, &a).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = kernel_eval(&params_1d(), &[0.0, 1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(KernelParams::new(0.0, vec![1.0], 0.1).is_err());
        assert!(KernelParams::new(1.0, vec![-1.0], 0.1).is_err());
        assert!(KernelParams::new(1.0, vec![1.0], 0.0).is_err());
        assert!(KernelParams::new(1.0, vec![], 0.1).is_err());
    }

    #[test]
    fn jacobian_zero_at_coincident_input() {
        let p = KernelParams::new(1.0, vec![0.5, 0.8], 0.1).unwrap();
        let x = DMatrix::from_column_slice(2, 2, &[0.3, 0.4, 1.0, -1.0]);
        let jac = kernel_input_jacobian(&p, &[0.3, 0.4], &x).unwrap();
        assert_eq!(jac[(0, 0)], 0.0);
        assert_eq!(jac[(1, 0)], 0.0);
        assert!(jac[(0, 1)] != 0.0);
    }

    #[test]
    fn jacobian_sign_decays_away_from_training_point() {
        let x = DMatrix::from_column_slice(1, 1, &[0.0]);
        let jac = kernel_input_jacobian(&params_1d(), &[0.5], &x).unwrap();
        assert!(jac[(0, 0)] < 0.0);
        let jac = kernel_input_jacobian(&params_1d(), &[-0.5], &x).unwrap();
        assert!(jac[(0, 0)] > 0.0);
    }
}
