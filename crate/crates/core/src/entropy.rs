//! Conditional differential entropy of a joint GP prediction.
//!
//! The entropy of H query inputs is taken as `log det Σ` of their joint
//! posterior covariance (additive constants dropped). A relative jitter
//! `1e-9·tr(Σ)/H` is added before factorizing; value and gradient both refer
//! to the jittered matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::{cross_covariance, kernel_input_jacobian_unchecked, GpModel};

/// Relative diagonal jitter applied to the posterior covariance.
pub const LOGDET_RELATIVE_JITTER: f64 = 1e-9;

/// Entropy value together with its gradient.
///
/// `gradient[i·n + d]` is the derivative with respect to coordinate `d` of
/// query input `i`.
#[derive(Debug, Clone)]
pub struct EntropyEval {
    pub value: f64,
    pub gradient: DVector<f64>,
}

struct Posterior {
    /// `(K + σ_n² I)⁻¹ K★ᵀ`, N×H.
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

fn check_set(model: &GpModel, xset: &DMatrix<f64>) -> Result<()> {
    if xset.ncols() == 0 {
        return Err(Error::DimensionMismatch("entropy needs at least one input".into()));
    }
    if xset.nrows() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} rows, model expects {}",
            xset.nrows(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn posterior(model: &GpModel, xset: &DMatrix<f64>) -> Posterior {
    let kernel = model.kernel();
    let kss = cross_covariance(kernel, xset, xset);
    if model.is_empty() {
        return Posterior {
            b: DMatrix::zeros(0, xset.ncols()),
            sigma: kss,
        };
    }
    let kst = cross_covariance(kernel, model.inputs(), xset);
    let v = model.solve_lower(&kst);
    let b = model.solve_upper_transpose(&v);
    let sigma = kss - v.transpose() * &v;
    Posterior {
        b,
        sigma: (&sigma + sigma.transpose()) * 0.5,
    }
}

fn jitter_for(sigma: &DMatrix<f64>) -> f64 {
    LOGDET_RELATIVE_JITTER * sigma.trace() / sigma.nrows() as f64
}

/// Returns `(log det(Σ + jI), (Σ + jI)⁻¹, j)`.
fn factor(sigma: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>, f64)> {
    let jitter = jitter_for(sigma);
    let mut m = sigma.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    let chol = m.cholesky().ok_or(Error::DegenerateEntropy { jitter })?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(Error::DegenerateEntropy { jitter });
    }
    Ok((logdet, chol.inverse(), jitter))
}

/// `log det(Σ + jI)` for the query inputs in the columns of `xset`.
pub fn entropy(model: &GpModel, xset: &DMatrix<f64>) -> Result<f64> {
    check_set(model, xset)?;
    Ok(factor(&posterior(model, xset).sigma)?.0)
}

/// Symmetrized `∂Σ/∂ν_j` where `ν` stacks the columns of `xset`.
///
/// `∂K★★/∂ν_j − 2 K★(K + σ_n² I)⁻¹ (∂K★/∂ν_j)ᵀ`, symmetrized as `(A + Aᵀ)/2`.
pub fn covariance_input_jacobian(model: &GpModel, xset: &DMatrix<f64>, j: usize) -> Result<DMatrix<f64>> {
    check_set(model, xset)?;
    let (n, h) = xset.shape();
    if j >= n * h {
        return Err(Error::DimensionMismatch(format!("index {j} out of range for {h} inputs of size {n}")));
    }
    let (i, d) = (j / n, j % n);
    let kernel = model.kernel();
    let xi = xset.column(i);

    let dk_set = kernel_input_jacobian_unchecked(kernel, xi.as_slice(), xset);
    let mut dkss = DMatrix::zeros(h, h);
    for m in 0..h {
        if m != i {
            dkss[(i, m)] = dk_set[(d, m)];
            dkss[(m, i)] = dk_set[(d, m)];
        }
    }

    let mut a = dkss;
    if !model.is_empty() {
        let dk_train = kernel_input_jacobian_unchecked(kernel, xi.as_slice(), model.inputs());
        let mut dks = DMatrix::zeros(h, model.len());
        dks.row_mut(i).copy_from(&dk_train.row(d));
        let ks = cross_covariance(kernel, xset, model.inputs());
        let weighted = model.solve(&dks.transpose());
        a -= (ks * weighted) * 2.0;
    }
    Ok((&a + a.transpose()) * 0.5)
}

/// Entropy and its gradient with respect to every coordinate of every input.
pub fn entropy_with_gradient(model: &GpModel, xset: &DMatrix<f64>) -> Result<EntropyEval> {
    check_set(model, xset)?;
    let (n, h) = xset.shape();
    let kernel = model.kernel();
    let post = posterior(model, xset);
    let (value, w, _) = factor(&post.sigma)?;
    let trace_w = w.trace();
    let jitter_scale = LOGDET_RELATIVE_JITTER / h as f64;

    let mut gradient = DVector::zeros(n * h);
    for i in 0..h {
        let xi = xset.column(i);
        // Row d: derivative of k(x_i, x_m) for every horizon input m.
        let dk_set = kernel_input_jacobian_unchecked(kernel, xi.as_slice(), xset);
        // Row d: gᵀB where g is the derivative of k(x_i, X).
        let cross = if model.is_empty() {
            DMatrix::zeros(n, h)
        } else {
            kernel_input_jacobian_unchecked(kernel, xi.as_slice(), model.inputs()) * &post.b
        };
        for d in 0..n {
            let mut acc = 0.0;
            for m in 0..h {
                if m != i {
                    acc += 2.0 * w[(i, m)] * dk_set[(d, m)];
                }
                acc -= 2.0 * cross[(d, m)] * w[(m, i)];
            }
            // d tr(Σ) = −2 gᵀB e_i, moving the jitter.
            acc += trace_w * jitter_scale * (-2.0 * cross[(d, i)]);
            gradient[i * n + d] = acc;
        }
    }
    Ok(EntropyEval { value, gradient })
}

/// Gradient of [`entropy`], flattened by input then coordinate.
pub fn entropy_gradient(model: &GpModel, xset: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(entropy_with_gradient(model, xset)?.gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::{central_difference, relative_error};
    use crate::gp::{build_model, predict, KernelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, n: usize, count: usize) -> GpModel {
        let inputs = DMatrix::from_fn(n, count, |_, _| rng.random_range(-2.0..2.0));
        let targets = DVector::from_fn(count, |_, _| rng.random_range(-1.0..1.0));
        let ls = (0..n).map(|_| rng.random_range(0.6..2.0)).collect();
        build_model(inputs, targets, KernelParams::new(1.3, ls, 0.05).unwrap()).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, h: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, h, |_, _| rng.random_range(-2.5..2.5))
    }

    fn perturbed(xset: &DMatrix<f64>, flat: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xset.nrows(), xset.ncols(), flat)
    }

    #[test]
    fn single_input_is_log_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 3, 10);
        let x = random_set(&mut rng, 3, 1);
        let var = predict(&model, &x).unwrap().covariance[(0, 0)];
        let expected = (var + LOGDET_RELATIVE_JITTER * var).ln();
        assert!((entropy(&model, &x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicated_input_bounded_by_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 2, 8);
        let x = random_set(&mut rng, 2, 1);
        let single = entropy(&model, &x).unwrap();
        let twice = DMatrix::from_columns(&[x.column(0), x.column(0)]);
        let var = predict(&model, &x).unwrap().covariance[(0, 0)];
        let jitter = LOGDET_RELATIVE_JITTER * var;
        let value = entropy(&model, &twice).unwrap();
        // det [[s+j, s], [s, s+j]] = j (2s + j)
        assert!((value - (jitter * (2.0 * var + jitter)).ln()).abs() < 1e-6);
        assert!(value <= single + (2.0 * jitter).ln() + 1e-9);
    }

    #[test]
    fn matches_dense_log_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(&mut rng, 4, 12);
        let xs = random_set(&mut rng, 4, 3);
        let ks = cross_covariance(model.kernel(), &xs, model.inputs());
        let kss = cross_covariance(model.kernel(), &xs, &xs);
        let inv = model.noisy_gram().try_inverse().unwrap();
        let mut sigma = kss - &ks * inv * ks.transpose();
        let jitter = LOGDET_RELATIVE_JITTER * sigma.trace() / 3.0;
        for i in 0..3 {
            sigma[(i, i)] += jitter;
        }
        let dense = sigma.determinant().ln();
        assert!((entropy(&model, &xs).unwrap() - dense).abs() < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let model = random_model(&mut rng, 4, 30);
            let xs = random_set(&mut rng, 4, 3);
            let g = entropy_gradient(&model, &xs).unwrap();
            let fd = central_difference(
                |v| entropy(&model, &perturbed(&xs, v)).unwrap(),
                xs.as_slice(),
                1e-5,
            );
            let err = relative_error(g.as_slice(), fd.as_slice());
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn covariance_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let model = random_model(&mut rng, 4, 30);
            let xs = random_set(&mut rng, 4, 3);
            for j in 0..12 {
                let jac = covariance_input_jacobian(&model, &xs, j).unwrap();
                let h = 1e-5;
                let mut plus = xs.clone();
                let mut minus = xs.clone();
                plus.as_mut_slice()[j] += h;
                minus.as_mut_slice()[j] -= h;
                let fd = (predict(&model, &plus).unwrap().covariance - predict(&model, &minus).unwrap().covariance)
                    / (2.0 * h);
                let err = (&jac - &fd).norm() / fd.norm().max(1e-12);
                assert!(err < 1e-4, "index {j}: relative error {err}");
            }
        }
    }

    #[test]
    fn jacobian_symmetric_for_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_model(&mut rng, 2, 6);
        let x = random_set(&mut rng, 2, 1);
        let xs = DMatrix::from_columns(&[x.column(0), x.column(0), x.column(0)]);
        for j in 0..6 {
            let jac = covariance_input_jacobian(&model, &xs, j).unwrap();
            assert!((&jac - jac.transpose()).amax() <= 1e-12);
        }
        assert!(covariance_input_jacobian(&model, &xs, 6).is_err());
    }

    #[test]
    fn single_input_gradient_is_scaled_variance_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = random_model(&mut rng, 3, 10);
        let x = random_set(&mut rng, 3, 1);
        let var = |v: &[f64]| predict(&model, &perturbed(&x, v)).unwrap().covariance[(0, 0)];
        let dvar = central_difference(var, x.as_slice(), 1e-6);
        let s = var(x.as_slice());
        let expected: Vec<f64> = dvar.iter().map(|g| g / s).collect();
        let g = entropy_gradient(&model, &x).unwrap();
        assert!(relative_error(g.as_slice(), &expected) < 1e-5);
    }

    #[test]
    fn prior_single_input_gradient_vanishes() {
        let model = GpModel::prior(KernelParams::new(1.0, vec![0.5, 2.0], 0.1).unwrap());
        let x = DMatrix::from_column_slice(2, 1, &[0.3, -1.0]);
        assert_eq!(entropy_gradient(&model, &x).unwrap().amax(), 0.0);
    }

    #[test]
    fn rejects_empty_or_mismatched_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = random_model(&mut rng, 2, 4);
        assert!(entropy(&model, &DMatrix::zeros(2, 0)).is_err());
        assert!(entropy(&model, &DMatrix::zeros(3, 2)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn permutation_invariant(seed in 0u64..1000, shift in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, 3, 10);
            let xs = random_set(&mut rng, 3, 3);
            let cols: Vec<_> = (0..3).map(|i| xs.column((i + shift) % 3)).collect();
            let permuted = DMatrix::from_columns(&cols);
            let a = entropy(&model, &xs).unwrap();
            let b = entropy(&model, &permuted).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }

        #[test]
        fn observation_never_increases_entropy(seed in 0u64..1000, pick in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, 3, 10);
            let xs = random_set(&mut rng, 3, 3);
            let before = entropy(&model, &xs).unwrap();
            let updated = model.with_observation(xs.column(pick).as_slice(), 0.4).unwrap();
            let after = entropy(&updated, &xs).unwrap();
            prop_assert!(after <= before + 1e-8);
        }
    }
}
