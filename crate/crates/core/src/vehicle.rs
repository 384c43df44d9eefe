//! Kinematic bicycle ground truth and the GP regressors derived from it.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RK4 substeps per sampling interval used by [`step_truth`].
pub const TRUTH_SUBSTEPS: usize = 4;

/// Per-step observation noise standard deviations for (Δx, Δy, Δθ).
pub const DEFAULT_OBSERVATION_NOISE: [f64; 3] = [0.005, 0.005, 0.002];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Centre of mass to front axle (m).
    pub l_f: f64,
    /// Centre of mass to rear axle (m).
    pub l_r: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { l_f: 0.205, l_r: 0.386 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Longitudinal acceleration (m/s²).
    pub accel: f64,
    /// Steering angle (rad).
    pub steer: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }
}

/// One-step increments plus the regressors they were generated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepObservation {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    /// `[cos θ, sin θ, v, α]`, the input of the Δx and Δy models.
    pub gp_input_p: [f64; 4],
    /// `[v, α]`, the input of the Δθ model.
    pub gp_input_a: [f64; 2],
}

/// Maps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// `β = atan(l_r / (l_f + l_r) · tan α)`.
pub fn slip_angle(steer: f64, l_f: f64, l_r: f64) -> Result<f64> {
    if !steer.is_finite() || steer.abs() >= FRAC_PI_2 {
        return Err(Error::Domain(format!("steering angle {steer} outside (−π/2, π/2)")));
    }
    Ok((l_r / (l_f + l_r) * steer.tan()).atan())
}

fn slip_unchecked(steer: f64, p: &VehicleParams) -> f64 {
    (p.l_r / (p.l_f + p.l_r) * steer.tan()).atan()
}

/// Time derivative `[ẋ, ẏ, θ̇, v̇]` of the kinematic bicycle.
pub fn continuous_derivative(s: &VehicleState, u: &ControlInput, params: &VehicleParams) -> [f64; 4] {
    let beta = slip_unchecked(u.steer, params);
    derivative_raw([s.x, s.y, s.theta, s.v], u.accel, beta, params.l_r)
}

#[inline]
fn derivative_raw(z: [f64; 4], accel: f64, beta: f64, l_r: f64) -> [f64; 4] {
    let (_, _, theta, v) = (z[0], z[1], z[2], z[3]);
    [
        v * (theta + beta).cos(),
        v * (theta + beta).sin(),
        v / l_r * beta.sin(),
        accel,
    ]
}

/// GP regressors for a state/control pair.
pub fn regressors(s: &VehicleState, u: &ControlInput) -> ([f64; 4], [f64; 2]) {
    regressors_raw(s.theta, s.v, u.steer)
}

#[inline]
pub(crate) fn regressors_raw(theta: f64, v: f64, steer: f64) -> ([f64; 4], [f64; 2]) {
    let (sin, cos) = theta.sin_cos();
    ([cos, sin, v, steer], [v, steer])
}

/// Integrates the continuous model over `dt` with RK4 ([`TRUTH_SUBSTEPS`] substeps).
///
/// The speed update is exactly `v + dt·a`.
pub fn step_truth(
    s: &VehicleState,
    u: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<(VehicleState, StepObservation)> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("sampling time must be positive, got {dt}")));
    }
    let beta = slip_angle(u.steer, params.l_f, params.l_r)?;
    let h = dt / TRUTH_SUBSTEPS as f64;
    let mut z = [0.0, 0.0, s.theta, s.v];
    for _ in 0..TRUTH_SUBSTEPS {
        let f = |z: [f64; 4]| derivative_raw(z, u.accel, beta, params.l_r);
        let add = |z: [f64; 4], k: [f64; 4], c: f64| [z[0] + c * k[0], z[1] + c * k[1], z[2] + c * k[2], z[3] + c * k[3]];
        let k1 = f(z);
        let k2 = f(add(z, k1, h / 2.0));
        let k3 = f(add(z, k2, h / 2.0));
        let k4 = f(add(z, k3, h));
        for i in 0..4 {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let (gp_input_p, gp_input_a) = regressors(s, u);
    let obs = StepObservation {
        dx: z[0],
        dy: z[1],
        dtheta: z[2] - s.theta,
        gp_input_p,
        gp_input_a,
    };
    let next = VehicleState {
        x: s.x + obs.dx,
        y: s.y + obs.dy,
        theta: wrap_angle(s.theta + obs.dtheta),
        v: s.v + dt * u.accel,
    };
    Ok((next, obs))
}

/// Adds independent Gaussian noise with standard deviations `sigma` to (Δx, Δy, Δθ).
pub fn observe_noisy<R: Rng + ?Sized>(obs: &StepObservation, sigma: [f64; 3], rng: &mut R) -> StepObservation {
    let mut noisy = *obs;
    let mut draw = |s: f64| {
        if s > 0.0 {
            Normal::new(0.0, s).expect("positive std").sample(rng)
        } else {
            0.0
        }
    };
    noisy.dx += draw(sigma[0]);
    noisy.dy += draw(sigma[1]);
    noisy.dtheta += draw(sigma[2]);
    noisy
}
