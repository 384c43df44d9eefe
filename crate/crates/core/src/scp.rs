//! Trust-region successive convex programming with exact-penalty merit.
//!
//! [`run_scp`] is generic over a [`ConvexModel`]: anything that can evaluate
//! its exact cost and solve a convex model of itself inside a trust region.
//! [`solve_rhalc`] instantiates it for the GP receding-horizon problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{kkt_residuals, solve_qp, QpSettings, QpStatus};
use crate::rhalc::{build_subproblem, exact_penalty_cost, simulate_gp_rollout, HorizonPlan, RhalcProblem};
use crate::vehicle::ControlInput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScpConfig {
    pub rho0: f64,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub beta_fail: f64,
    pub beta_succ: f64,
    pub epsilon: f64,
    pub j_max: usize,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self {
            rho0: 0.1,
            r0: 0.01,
            r1: 0.1,
            r2: 0.3,
            beta_fail: 0.5,
            beta_succ: 2.0,
            epsilon: 1e-4,
            j_max: 100,
        }
    }
}

impl ScpConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho0 > 0.0
            && 0.0 < self.r0
            && self.r0 < self.r1
            && self.r1 < self.r2
            && self.r2 < 1.0
            && 0.0 < self.beta_fail
            && self.beta_fail < 1.0
            && self.beta_succ > 1.0
            && self.epsilon > 0.0
            && self.j_max > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SCP parameters: {self:?}")))
        }
    }
}

/// Solution of one convex model step.
#[derive(Debug, Clone)]
pub struct ModelStep<I> {
    /// Candidate iterate, already re-simulated with the exact model.
    pub iterate: I,
    /// Optimal value of the convex model (the predicted cost).
    pub predicted_cost: f64,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
}

pub trait ConvexModel {
    type Iterate: Clone;

    fn exact_cost(&self, it: &Self::Iterate) -> Result<f64>;

    /// Convexifies around `it` and solves within radius `rho`. `Ok(None)`
    /// signals that the convex solver did not converge.
    fn solve_model(&self, it: &Self::Iterate, rho: f64) -> Result<Option<ModelStep<Self::Iterate>>>;
}

/// What happened at one SCP iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub rho: f64,
    /// Actual cost reduction δ; `None` when no candidate was evaluated.
    pub actual: Option<f64>,
    /// Predicted cost reduction δ̃.
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
    pub accepted: bool,
    /// Merit value of the current iterate after this iteration.
    pub phi: f64,
    pub qp_failed: bool,
    pub qp_iterations: usize,
    pub kkt_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScpState {
    pub rho: f64,
    pub phi: f64,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    /// Number of radius reductions.
    pub shrinks: usize,
    /// Number of radius enlargements.
    pub grows: usize,
    /// `|δ̃| ≤ ε` was reached.
    pub converged: bool,
}

impl ScpState {
    pub fn accepted(&self) -> usize {
        self.history.iter().filter(|r| r.accepted).count()
    }

    /// Merit values of the initial iterate followed by every accepted one.
    pub fn accepted_phi(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(first) = self.history.first() {
            let initial = if first.accepted {
                first.phi + first.actual.unwrap_or(0.0)
            } else {
                first.phi
            };
            out.push(initial);
        }
        out.extend(self.history.iter().filter(|r| r.accepted).map(|r| r.phi));
        out
    }

    pub fn final_predicted_reduction(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.predicted)
    }
}

/// Runs the trust-region loop from `initial`; returns the last accepted iterate.
///
/// Fails with [`Error::SolverStalled`] only when no convex model was solved at
/// any iteration; `warm_start` is handed back in that error.
pub fn run_scp<M: ConvexModel>(
    model: &M,
    initial: M::Iterate,
    config: &ScpConfig,
    warm_start: &[ControlInput],
) -> Result<(M::Iterate, ScpState)> {
    config.validate()?;
    let mut current = initial;
    let mut phi = model.exact_cost(&current)?;
    let mut state = ScpState {
        rho: config.rho0,
        phi,
        iterations: 0,
        history: Vec::new(),
        shrinks: 0,
        grows: 0,
        converged: false,
    };
    let mut any_solved = false;

    for _ in 0..config.j_max {
        state.iterations += 1;
        let rho = state.rho;
        let step = match model.solve_model(&current, rho) {
            Ok(step) => step,
            Err(Error::Build(_)) | Err(Error::DegenerateEntropy { .. }) => None,
            Err(e) => return Err(e),
        };
        let Some(step) = step else {
            state.rho *= config.beta_fail;
            state.shrinks += 1;
            state.history.push(IterationRecord {
                rho,
                actual: None,
                predicted: None,
                ratio: None,
                accepted: false,
                phi,
                qp_failed: true,
                qp_iterations: 0,
                kkt_residual: None,
            });
            continue;
        };
        any_solved = true;
        let predicted = phi - step.predicted_cost;
        let mut record = IterationRecord {
            rho,
            actual: None,
            predicted: Some(predicted),
            ratio: None,
            accepted: false,
            phi,
            qp_failed: false,
            qp_iterations: step.qp_iterations,
            kkt_residual: Some(step.kkt_residual),
        };
        if predicted.abs() <= config.epsilon {
            state.converged = true;
            state.history.push(record);
            break;
        }
        let candidate_phi = if predicted > 0.0 {
            model.exact_cost(&step.iterate).ok()
        } else {
            None
        };
        let Some(candidate_phi) = candidate_phi else {
            state.rho *= config.beta_fail;
            state.shrinks += 1;
            state.history.push(record);
            continue;
        };
        let actual = phi - candidate_phi;
        let ratio = actual / predicted;
        record.actual = Some(actual);
        record.ratio = Some(ratio);
        if ratio < config.r0 {
            state.rho *= config.beta_fail;
            state.shrinks += 1;
        } else {
            current = step.iterate;
            phi = candidate_phi;
            record.accepted = true;
            record.phi = phi;
            if ratio < config.r1 {
                state.rho *= config.beta_fail;
                state.shrinks += 1;
            } else if ratio >= config.r2 {
                state.rho *= config.beta_succ;
                state.grows += 1;
            }
        }
        state.history.push(record);
    }

    state.phi = phi;
    if !any_solved {
        return Err(Error::SolverStalled {
            iterations: state.iterations,
            warm_start: warm_start.to_vec(),
        });
    }
    Ok((current, state))
}

/// The GP receding-horizon problem as a [`ConvexModel`] over horizon plans.
pub struct RhalcModel<'p, 'm> {
    pub problem: &'p RhalcProblem<'m>,
    pub qp: QpSettings,
}

impl ConvexModel for RhalcModel<'_, '_> {
    type Iterate = HorizonPlan;

    fn exact_cost(&self, plan: &HorizonPlan) -> Result<f64> {
        Ok(exact_penalty_cost(self.problem, plan)?.total)
    }

    fn solve_model(&self, plan: &HorizonPlan, rho: f64) -> Result<Option<ModelStep<HorizonPlan>>> {
        let sub = build_subproblem(self.problem, plan, rho)?;
        let sol = solve_qp(&sub.qp, &self.qp)?;
        if sol.status != QpStatus::Solved {
            return Ok(None);
        }
        let controls: Vec<ControlInput> = sub
            .layout
            .controls(plan, sol.primal.as_slice())
            .into_iter()
            .map(|u| self.problem.bounds.clamp(u))
            .collect();
        let iterate = simulate_gp_rollout(self.problem.models, &controls, &self.problem.initial, self.problem.dt);
        Ok(Some(ModelStep {
            iterate,
            predicted_cost: sol.objective,
            qp_iterations: sol.iterations,
            kkt_residual: kkt_residuals(&sub.qp, &sol).max(),
        }))
    }
}

/// Solves one receding-horizon problem starting from `warm_start` controls.
pub fn solve_rhalc(
    problem: &RhalcProblem,
    config: &ScpConfig,
    qp: &QpSettings,
    warm_start: &[ControlInput],
) -> Result<(Vec<ControlInput>, HorizonPlan, ScpState)> {
    problem.validate()?;
    if warm_start.len() != problem.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "warm start has {} controls, horizon is {}",
            warm_start.len(),
            problem.horizon()
        )));
    }
    if let Some(u) = warm_start.iter().find(|u| !problem.bounds.contains(u)) {
        return Err(Error::Domain(format!("warm start control {u:?} violates input bounds")));
    }
    let warm_start = problem.bounds.speed_feasible(warm_start, problem.initial.v, problem.dt);
    let initial = simulate_gp_rollout(problem.models, &warm_start, &problem.initial, problem.dt);
    let model = RhalcModel { problem, qp: *qp };
    let (plan, state) = run_scp(&model, initial, config, &warm_start)?;
    Ok((plan.controls.clone(), plan, state))
}
