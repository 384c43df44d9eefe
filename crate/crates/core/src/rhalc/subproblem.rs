use crate::error::{Error, Result};
use crate::gp::mean_gradient;
use crate::qp::{QpBuilder, QpProblem};
use crate::vehicle::ControlInput;

use super::{plan_entropy_with_gradient, tracking_cost, HorizonPlan, RhalcProblem};

/// Variable ordering of the convexified subproblem.
///
/// For a horizon `H` the decision vector is
/// `[Δu (2H) | Δstate for k = 1..H (4H) | Δoutput (3H) | slacks]`, where a state
/// perturbation is `(Δx, Δy, Δθ, Δv)` and an output perturbation is the change
/// of the `(Δx, Δy, Δθ)` GP means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubproblemLayout {
    pub horizon: usize,
}

impl SubproblemLayout {
    /// `c = 0` acceleration, `c = 1` steering.
    pub fn control(&self, k: usize, c: usize) -> usize {
        2 * k + c
    }

    /// Perturbation of state `k ∈ 1..=H`; `c` indexes `(x, y, θ, v)`.
    pub fn state(&self, k: usize, c: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon);
        2 * self.horizon + 4 * (k - 1) + c
    }

    /// Perturbation of the GP output means of step `k`.
    pub fn output(&self, k: usize, c: usize) -> usize {
        6 * self.horizon + 3 * k + c
    }

    pub fn core_len(&self) -> usize {
        9 * self.horizon
    }

    /// Nominal controls shifted by the control perturbations in `primal`.
    pub fn controls(&self, plan: &HorizonPlan, primal: &[f64]) -> Vec<ControlInput> {
        plan.controls
            .iter()
            .enumerate()
            .map(|(k, u)| ControlInput::new(u.accel + primal[self.control(k, 0)], u.steer + primal[self.control(k, 1)]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Subproblem {
    pub qp: QpProblem,
    pub layout: SubproblemLayout,
}

fn finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Build("non-finite linearization data".into()))
    }
}

/// Linearizes the GP means and entropy around `plan` and assembles the
/// penalized convex QP restricted to a trust region of radius `rho`.
///
/// The QP objective at zero perturbation equals the exact penalized cost of
/// `plan`, so its optimal value is the predicted cost of the step.
pub fn build_subproblem(problem: &RhalcProblem, plan: &HorizonPlan, rho: f64) -> Result<Subproblem> {
    problem.validate()?;
    let h = plan.horizon();
    if h != problem.horizon() {
        return Err(Error::DimensionMismatch(format!("plan horizon {h} vs problem horizon {}", problem.horizon())));
    }
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!("trust radius must be nonnegative, got {rho}")));
    }
    let layout = SubproblemLayout { horizon: h };
    let mut b = QpBuilder::new(layout.core_len());
    let bounds = &problem.bounds;
    let w = &problem.weights;

    for (k, u) in plan.controls.iter().enumerate() {
        let ia = layout.control(k, 0);
        let is = layout.control(k, 1);
        b.set_bounds(ia, (-rho).max(bounds.accel[0] - u.accel), rho.min(bounds.accel[1] - u.accel));
        b.set_bounds(is, (-rho).max(bounds.steer[0] - u.steer), rho.min(bounds.steer[1] - u.steer));
    }
    // States entering the regressors sit inside the trust region too.
    for k in 1..h {
        b.set_bounds(layout.state(k, 2), -rho, rho);
        b.set_bounds(layout.state(k, 3), -rho, rho);
    }

    for k in 0..h {
        for c in 0..3 {
            let mut form = vec![(layout.state(k + 1, c), 1.0), (layout.output(k, c), -1.0)];
            if k > 0 {
                form.push((layout.state(k, c), -1.0));
            }
            b.add_equality(form, 0.0);
        }
        let mut form = vec![(layout.state(k + 1, 3), 1.0), (layout.control(k, 0), -problem.dt)];
        if k > 0 {
            form.push((layout.state(k, 3), -1.0));
        }
        b.add_equality(form, 0.0);

        let (sin, cos) = plan.states[k].theta.sin_cos();
        let gx = mean_gradient(&problem.models.dx, &plan.regressors_p[k])?;
        let gy = mean_gradient(&problem.models.dy, &plan.regressors_p[k])?;
        let gt = mean_gradient(&problem.models.dtheta, &plan.regressors_a[k])?;
        finite(gx.as_slice())?;
        finite(gy.as_slice())?;
        finite(gt.as_slice())?;
        for (c, g) in [(0, &gx), (1, &gy)] {
            let mut form = vec![(layout.output(k, c), 1.0), (layout.control(k, 1), -g[3])];
            if k > 0 {
                form.push((layout.state(k, 2), -(-g[0] * sin + g[1] * cos)));
                form.push((layout.state(k, 3), -g[2]));
            }
            b.add_equality(form, 0.0);
        }
        let mut form = vec![(layout.output(k, 2), 1.0), (layout.control(k, 1), -gt[1])];
        if k > 0 {
            form.push((layout.state(k, 3), -gt[0]));
        }
        b.add_equality(form, 0.0);
    }

    b.add_constant(tracking_cost(problem, plan));
    for k in 0..h {
        let s = &plan.states[k + 1];
        let r = problem.reference[k];
        let (ix, iy) = (layout.state(k + 1, 0), layout.state(k + 1, 1));
        b.add_quadratic(ix, ix, 2.0 * w.position[0]);
        b.add_quadratic(iy, iy, 2.0 * w.position[1]);
        b.add_linear(ix, 2.0 * w.position[0] * (s.x - r[0]));
        b.add_linear(iy, 2.0 * w.position[1] * (s.y - r[1]));
        let u = &plan.controls[k];
        let (ia, is) = (layout.control(k, 0), layout.control(k, 1));
        b.add_quadratic(ia, ia, 2.0 * w.input[0]);
        b.add_quadratic(is, is, 2.0 * w.input[1]);
        b.add_linear(ia, 2.0 * w.input[0] * u.accel);
        b.add_linear(is, 2.0 * w.input[1] * u.steer);
    }

    if w.gamma > 0.0 {
        let [ex, ey, et] = plan_entropy_with_gradient(problem.models, plan)?;
        finite(&[ex.value, ey.value, et.value])?;
        finite(ex.gradient.as_slice())?;
        finite(ey.gradient.as_slice())?;
        finite(et.gradient.as_slice())?;
        b.add_constant(-w.gamma * (ex.value + ey.value + et.value));
        let gp = &ex.gradient + &ey.gradient;
        let ga = &et.gradient;
        for k in 0..h {
            b.add_linear(layout.control(k, 1), -w.gamma * (gp[4 * k + 3] + ga[2 * k + 1]));
            if k > 0 {
                let (sin, cos) = plan.states[k].theta.sin_cos();
                b.add_linear(layout.state(k, 2), -w.gamma * (-gp[4 * k] * sin + gp[4 * k + 1] * cos));
                b.add_linear(layout.state(k, 3), -w.gamma * (gp[4 * k + 2] + ga[2 * k]));
            }
        }
    }

    let tau = problem.penalties.inequality;
    for k in 0..h {
        let s = &plan.states[k + 1];
        let iv = layout.state(k + 1, 3);
        b.add_inequality(vec![(iv, 1.0)], bounds.speed[1] - s.v);
        b.add_inequality(vec![(iv, -1.0)], s.v - bounds.speed[0]);
        for plane in &problem.corridor.steps[k] {
            let form = vec![
                (layout.state(k + 1, 0), plane.normal[0]),
                (layout.state(k + 1, 1), plane.normal[1]),
            ];
            b.add_hinge_penalty(form, plane.violation([s.x, s.y]), tau);
        }
    }

    Ok(Subproblem { qp: b.build(), layout })
}
