//! The receding-horizon active learning and control problem over GP dynamics:
//! horizon plans, exact penalized cost, and the convexified subproblem.

mod subproblem;

use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::GpDynamics;
use crate::entropy::{entropy, entropy_with_gradient, EntropyEval};
use crate::error::{Error, Result};
use crate::vehicle::{regressors_raw, ControlInput, VehicleState};

pub use subproblem::{build_subproblem, Subproblem, SubproblemLayout};

/// `normal · p ≤ offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub normal: [f64; 2],
    pub offset: f64,
}

impl HalfPlane {
    /// Signed violation `normal · p − offset` (positive outside).
    pub fn violation(&self, p: [f64; 2]) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] - self.offset
    }
}

/// Position constraints per horizon step; `steps[k]` constrains the position
/// reached after applying control `k`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub steps: Vec<Vec<HalfPlane>>,
}

impl Corridor {
    pub fn unconstrained(horizon: usize) -> Self {
        Self {
            steps: vec![Vec::new(); horizon],
        }
    }

    /// Axis-aligned box `[x_min, x_max] × [y_min, y_max]` at every step.
    pub fn axis_box(horizon: usize, x: [f64; 2], y: [f64; 2]) -> Self {
        let planes = vec![
            HalfPlane { normal: [1.0, 0.0], offset: x[1] },
            HalfPlane { normal: [-1.0, 0.0], offset: -x[0] },
            HalfPlane { normal: [0.0, 1.0], offset: y[1] },
            HalfPlane { normal: [0.0, -1.0], offset: -y[0] },
        ];
        Self {
            steps: vec![planes; horizon],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlBounds {
    pub speed: [f64; 2],
    pub accel: [f64; 2],
    pub steer: [f64; 2],
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            speed: [0.0, 2.0],
            accel: [-2.0, 2.0],
            steer: [-FRAC_PI_4, FRAC_PI_4],
        }
    }
}

impl ControlBounds {
    pub fn contains(&self, u: &ControlInput) -> bool {
        (self.accel[0]..=self.accel[1]).contains(&u.accel) && (self.steer[0]..=self.steer[1]).contains(&u.steer)
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput::new(u.accel.clamp(self.accel[0], self.accel[1]), u.steer.clamp(self.steer[0], self.steer[1]))
    }
}

/// Slack allowed on the initial speed, covering QP tolerance carried over
/// from the previous step.
const SPEED_TOLERANCE: f64 = 1e-4;

impl ControlBounds {
    /// Narrows each acceleration in turn so the speed starting at `v0` stays
    /// within the speed bounds.
    pub fn speed_feasible(&self, controls: &[ControlInput], v0: f64, dt: f64) -> Vec<ControlInput> {
        let mut v = v0;
        controls
            .iter()
            .map(|u| {
                let lo = self.accel[0].max((self.speed[0] - v) / dt);
                let hi = self.accel[1].min((self.speed[1] - v) / dt);
                let accel = if lo > hi { if v > self.speed[1] { lo } else { hi } } else { u.accel.clamp(lo, hi) };
                let accel = accel.clamp(self.accel[0], self.accel[1]);
                v += dt * accel;
                ControlInput::new(accel, u.steer)
            })
            .collect()
    }
}

/// Diagonal tracking weights and the entropy weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    /// Diagonal of Q on `(x, y)` tracking error.
    pub position: [f64; 2],
    /// Diagonal of R on `(a, α)`.
    pub input: [f64; 2],
    pub gamma: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            position: [100.0, 100.0],
            input: [0.1, 0.1],
            gamma: 10.0,
        }
    }
}

/// Exact-penalty weights for inequality (hinge) and equality (absolute) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Penalties {
    pub inequality: f64,
    pub equality: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            inequality: 1e6,
            equality: 1e6,
        }
    }
}

/// One receding-horizon problem instance.
#[derive(Debug, Clone)]
pub struct RhalcProblem<'a> {
    pub models: &'a GpDynamics,
    pub initial: VehicleState,
    /// Target positions after each control of the horizon.
    pub reference: Vec<[f64; 2]>,
    pub corridor: Corridor,
    pub weights: ObjectiveWeights,
    pub bounds: ControlBounds,
    pub penalties: Penalties,
    pub dt: f64,
}

impl RhalcProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.reference.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.horizon();
        if h == 0 {
            return Err(Error::Domain("horizon must contain at least one step".into()));
        }
        if self.corridor.steps.len() != h {
            return Err(Error::DimensionMismatch(format!(
                "corridor has {} steps, horizon is {h}",
                self.corridor.steps.len()
            )));
        }
        if !(self.dt > 0.0) || self.weights.gamma < 0.0 {
            return Err(Error::Domain("sampling time must be positive and gamma nonnegative".into()));
        }
        let [lo, hi] = self.bounds.speed;
        if !(self.initial.v >= lo - SPEED_TOLERANCE && self.initial.v <= hi + SPEED_TOLERANCE) {
            return Err(Error::Domain(format!("initial speed {} outside [{lo}, {hi}]", self.initial.v)));
        }
        Ok(())
    }
}

/// Nominal controls with the GP rollout they induce.
///
/// `states[0]` is the initial state and `states[k + 1] = states[k] + outputs[k]`
/// (speed: `+ dt·accel`); headings are not wrapped so the recursion is exact.
/// Regressors `k` are built from `states[k]` and `controls[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPlan {
    pub controls: Vec<ControlInput>,
    pub outputs: Vec<[f64; 3]>,
    pub states: Vec<VehicleState>,
    pub regressors_p: Vec<[f64; 4]>,
    pub regressors_a: Vec<[f64; 2]>,
}

impl HorizonPlan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Regressors as column matrices `(4×H, 2×H)`.
    pub fn regressor_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = self.horizon();
        (
            DMatrix::from_fn(4, h, |d, k| self.regressors_p[k][d]),
            DMatrix::from_fn(2, h, |d, k| self.regressors_a[k][d]),
        )
    }
}

/// Chains the GP means through the discrete bicycle recursion.
pub fn simulate_gp_rollout(models: &GpDynamics, controls: &[ControlInput], initial: &VehicleState, dt: f64) -> HorizonPlan {
    let h = controls.len();
    let mut states = Vec::with_capacity(h + 1);
    let mut outputs = Vec::with_capacity(h);
    let mut regressors_p = Vec::with_capacity(h);
    let mut regressors_a = Vec::with_capacity(h);
    states.push(*initial);
    for u in controls {
        let s = *states.last().expect("non-empty");
        let (xp, xa) = regressors_raw(s.theta, s.v, u.steer);
        let y = [
            models.dx.mean_unchecked(&xp),
            models.dy.mean_unchecked(&xp),
            models.dtheta.mean_unchecked(&xa),
        ];
        regressors_p.push(xp);
        regressors_a.push(xa);
        outputs.push(y);
        states.push(VehicleState {
            x: s.x + y[0],
            y: s.y + y[1],
            theta: s.theta + y[2],
            v: s.v + dt * u.accel,
        });
    }
    HorizonPlan {
        controls: controls.to_vec(),
        outputs,
        states,
        regressors_p,
        regressors_a,
    }
}

/// The terms of the exact penalized cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tracking: f64,
    /// `H_x + H_y + H_θ`; zero when `γ = 0` (not evaluated).
    pub entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

pub(crate) fn tracking_cost(problem: &RhalcProblem, plan: &HorizonPlan) -> f64 {
    let w = &problem.weights;
    let mut j = 0.0;
    for k in 0..plan.horizon() {
        let s = &plan.states[k + 1];
        let r = problem.reference[k];
        let u = &plan.controls[k];
        j += w.position[0] * (s.x - r[0]).powi(2) + w.position[1] * (s.y - r[1]).powi(2);
        j += w.input[0] * u.accel.powi(2) + w.input[1] * u.steer.powi(2);
    }
    j
}

pub(crate) fn penalty_cost(problem: &RhalcProblem, plan: &HorizonPlan) -> f64 {
    let mut total = 0.0;
    for k in 0..plan.horizon() {
        let s = &plan.states[k + 1];
        for plane in &problem.corridor.steps[k] {
            total += plane.violation([s.x, s.y]).max(0.0);
        }
    }
    problem.penalties.inequality * total
}

/// Entropy terms of the three models at the plan's regressors.
pub(crate) fn plan_entropy_with_gradient(models: &GpDynamics, plan: &HorizonPlan) -> Result<[EntropyEval; 3]> {
    let (xp, xa) = plan.regressor_matrices();
    Ok([
        entropy_with_gradient(&models.dx, &xp)?,
        entropy_with_gradient(&models.dy, &xp)?,
        entropy_with_gradient(&models.dtheta, &xa)?,
    ])
}

/// `H_x + H_y + H_θ` at the plan's regressors.
pub fn plan_entropy(models: &GpDynamics, plan: &HorizonPlan) -> Result<f64> {
    let (xp, xa) = plan.regressor_matrices();
    Ok(entropy(&models.dx, &xp)? + entropy(&models.dy, &xp)? + entropy(&models.dtheta, &xa)?)
}

/// `J − γ(H_x + H_y + H_θ) + τ Σ max(0, g)` evaluated on an exact rollout.
pub fn exact_penalty_cost(problem: &RhalcProblem, plan: &HorizonPlan) -> Result<CostBreakdown> {
    let tracking = tracking_cost(problem, plan);
    let penalty = penalty_cost(problem, plan);
    let entropy = if problem.weights.gamma > 0.0 {
        plan_entropy(problem.models, plan)?
    } else {
        0.0
    };
    Ok(CostBreakdown {
        tracking,
        entropy,
        penalty,
        total: tracking - problem.weights.gamma * entropy + penalty,
    })
}

#[cfg(test)]
mod tests;
