//! The three independent GPs modelling the one-step increments of the bicycle.

use std::path::Path;

use rand::Rng;

use crate::error::Result;
use crate::gp::{build_model_from_points, fit_hyperparameters, load_model, save_model, FitOptions, GpModel, KernelParams};
use crate::vehicle::{regressors_raw, StepObservation};

/// Models for Δx and Δy (input `[cos θ, sin θ, v, α]`) and Δθ (input `[v, α]`).
#[derive(Debug, Clone)]
pub struct GpDynamics {
    pub dx: GpModel,
    pub dy: GpModel,
    pub dtheta: GpModel,
}

/// Starting hyperparameters before any likelihood fit.
pub fn default_kernels() -> [KernelParams; 3] {
    let position = KernelParams::isotropic(4, 0.1, 1.0, 1e-4).expect("valid defaults");
    let heading = KernelParams::isotropic(2, 0.05, 1.0, 1e-4).expect("valid defaults");
    [position.clone(), position, heading]
}

pub const MODEL_NAMES: [&str; 3] = ["dx", "dy", "dtheta"];

impl GpDynamics {
    pub fn prior(kernels: [KernelParams; 3]) -> Self {
        let [kx, ky, kt] = kernels;
        Self {
            dx: GpModel::prior(kx),
            dy: GpModel::prior(ky),
            dtheta: GpModel::prior(kt),
        }
    }

    pub fn from_observations(obs: &[StepObservation], kernels: [KernelParams; 3]) -> Result<Self> {
        let xp: Vec<Vec<f64>> = obs.iter().map(|o| o.gp_input_p.to_vec()).collect();
        let xa: Vec<Vec<f64>> = obs.iter().map(|o| o.gp_input_a.to_vec()).collect();
        let [kx, ky, kt] = kernels;
        Ok(Self {
            dx: build_model_from_points(&xp, &obs.iter().map(|o| o.dx).collect::<Vec<_>>(), kx)?,
            dy: build_model_from_points(&xp, &obs.iter().map(|o| o.dy).collect::<Vec<_>>(), ky)?,
            dtheta: build_model_from_points(&xa, &obs.iter().map(|o| o.dtheta).collect::<Vec<_>>(), kt)?,
        })
    }

    pub fn models(&self) -> [&GpModel; 3] {
        [&self.dx, &self.dy, &self.dtheta]
    }

    pub fn kernels(&self) -> [KernelParams; 3] {
        [self.dx.kernel().clone(), self.dy.kernel().clone(), self.dtheta.kernel().clone()]
    }

    /// Number of observations (identical for all three models).
    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predicted `(Δx, Δy, Δθ)` means for heading `theta`, speed `v` and steering `steer`.
    pub fn predict_step(&self, theta: f64, v: f64, steer: f64) -> [f64; 3] {
        let (xp, xa) = regressors_raw(theta, v, steer);
        [
            self.dx.mean_unchecked(&xp),
            self.dy.mean_unchecked(&xp),
            self.dtheta.mean_unchecked(&xa),
        ]
    }

    /// Appends one observation to all three models and refactorizes.
    pub fn with_observation(&self, obs: &StepObservation) -> Result<Self> {
        Ok(Self {
            dx: self.dx.with_observation(&obs.gp_input_p, obs.dx)?,
            dy: self.dy.with_observation(&obs.gp_input_p, obs.dy)?,
            dtheta: self.dtheta.with_observation(&obs.gp_input_a, obs.dtheta)?,
        })
    }

    /// Refits the hyperparameters of every model by maximum likelihood.
    pub fn refit<R: Rng + ?Sized>(&self, opts: &FitOptions, rng: &mut R) -> Result<Self> {
        let fit = |m: &GpModel, rng: &mut R| -> Result<GpModel> {
            let params = fit_hyperparameters(m.inputs(), m.targets(), m.kernel(), opts, rng)?;
            m.with_kernel(params)
        };
        Ok(Self {
            dx: fit(&self.dx, rng)?,
            dy: fit(&self.dy, rng)?,
            dtheta: fit(&self.dtheta, rng)?,
        })
    }

    /// Writes `dx.gp`, `dy.gp` and `dtheta.gp` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, model) in MODEL_NAMES.iter().zip(self.models()) {
            save_model(model, &dir.join(format!("{name}.gp")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            dx: load_model(&dir.join("dx.gp"))?,
            dy: load_model(&dir.join("dy.gp"))?,
            dtheta: load_model(&dir.join("dtheta.gp"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{step_truth, ControlInput, VehicleParams, VehicleState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_observations(count: usize) -> Vec<StepObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..count)
            .map(|_| {
                let s = VehicleState::new(0.0, 0.0, rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0));
                let u = ControlInput::new(0.0, rng.random_range(-0.7..0.7));
                step_truth(&s, &u, 0.2, &VehicleParams::default()).unwrap().1
            })
            .collect()
    }

    #[test]
    fn prior_predicts_zero() {
        let m = GpDynamics::prior(default_kernels());
        assert_eq!(m.predict_step(0.3, 1.0, 0.1), [0.0; 3]);
        assert!(m.is_empty());
    }

    #[test]
    fn observation_added_to_all_models() {
        let obs = sample_observations(5);
        let m = GpDynamics::from_observations(&obs[..4], default_kernels()).unwrap();
        let bigger = m.with_observation(&obs[4]).unwrap();
        assert_eq!(bigger.len(), 5);
        assert_eq!(bigger.dtheta.len(), 5);
        assert_eq!(bigger.dtheta.inputs().column(4).as_slice(), &obs[4].gp_input_a);
    }

    #[test]
    fn save_and_load_round_trip() {
        let m = GpDynamics::from_observations(&sample_observations(6), default_kernels()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = GpDynamics::load(dir.path()).unwrap();
        assert_eq!(back.predict_step(0.2, 1.1, -0.3), m.predict_step(0.2, 1.1, -0.3));
    }
}
