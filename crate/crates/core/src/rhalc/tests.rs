use super::*;
use crate::dynamics::default_kernels;
use crate::gp::{mean_gradient, predict};
use crate::qp::{kkt_residuals, solve_qp, QpSettings, QpStatus};
use crate::vehicle::{step_truth, StepObservation, VehicleParams};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained_models(seed: u64, count: usize) -> GpDynamics {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs: Vec<StepObservation> = (0..count)
        .map(|_| {
            let s = VehicleState::new(0.0, 0.0, rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0));
            let u = ControlInput::new(0.0, rng.random_range(-0.75..0.75));
            step_truth(&s, &u, 0.2, &VehicleParams::default()).unwrap().1
        })
        .collect();
    GpDynamics::from_observations(&obs, default_kernels()).unwrap()
}

fn random_controls(rng: &mut ChaCha8Rng, h: usize) -> Vec<ControlInput> {
    (0..h)
        .map(|_| ControlInput::new(rng.random_range(-2.0..2.0), rng.random_range(-0.7..0.7)))
        .collect()
}

fn problem_for<'a>(models: &'a GpDynamics, initial: VehicleState, h: usize, gamma: f64) -> RhalcProblem<'a> {
    RhalcProblem {
        models,
        initial,
        reference: (0..h).map(|k| [initial.x + 0.3 * (k + 1) as f64, initial.y]).collect(),
        corridor: Corridor::unconstrained(h),
        weights: ObjectiveWeights {
            gamma,
            ..ObjectiveWeights::default()
        },
        bounds: ControlBounds::default(),
        penalties: Penalties::default(),
        dt: 0.2,
    }
}

/// Point with zero perturbations and slacks at their minimal values.
fn zero_point(sub: &Subproblem) -> DVector<f64> {
    let qp = &sub.qp;
    let mut z = DVector::zeros(qp.num_vars());
    for i in sub.layout.core_len()..qp.num_vars() {
        // Each slack appears with coefficient −1 in exactly one inequality here.
        let row = (0..qp.a_in.nrows()).find(|&r| qp.a_in[(r, i)] == -1.0).unwrap();
        z[i] = (-qp.b_in[row]).max(0.0);
    }
    z
}

#[test]
fn prior_rollout_holds_position() {
    let models = GpDynamics::prior(default_kernels());
    let controls = vec![ControlInput::new(1.0, 0.2), ControlInput::new(-0.5, 0.0), ControlInput::new(0.3, -0.1)];
    let start = VehicleState::new(1.0, -2.0, 0.5, 0.4);
    let plan = simulate_gp_rollout(&models, &controls, &start, 0.2);
    assert_eq!(plan.outputs, vec![[0.0; 3]; 3]);
    let speeds: Vec<f64> = plan.states.iter().map(|s| s.v).collect();
    let expected = [0.4, 0.6, 0.5, 0.56];
    for (a, b) in speeds.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(plan.states.iter().all(|s| s.x == 1.0 && s.y == -2.0 && s.theta == 0.5));
}

#[test]
fn single_step_rollout_is_one_prediction() {
    let models = trained_models(1, 40);
    let start = VehicleState::new(0.5, 0.2, -1.0, 1.2);
    let u = ControlInput::new(0.5, 0.3);
    let plan = simulate_gp_rollout(&models, &[u], &start, 0.2);
    let xp = nalgebra::DMatrix::from_column_slice(4, 1, &[(-1.0f64).cos(), (-1.0f64).sin(), 1.2, 0.3]);
    let mx = predict(&models.dx, &xp).unwrap().mean[0];
    assert!((plan.states[1].x - (0.5 + mx)).abs() < 1e-12);
    assert!((plan.states[1].v - 1.3).abs() < 1e-12);
}

#[test]
fn three_step_rollout_matches_manual_chain() {
    let models = trained_models(2, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let controls = random_controls(&mut rng, 3);
    let start = VehicleState::new(0.0, 0.0, 0.7, 1.0);
    let plan = simulate_gp_rollout(&models, &controls, &start, 0.2);
    let (mut x, mut y, mut th, mut v): (f64, f64, f64, f64) = (0.0, 0.0, 0.7, 1.0);
    for u in &controls {
        let xp = [th.cos(), th.sin(), v, u.steer];
        let xa = [v, u.steer];
        x += models.dx.predict_mean(&xp).unwrap();
        y += models.dy.predict_mean(&xp).unwrap();
        th += models.dtheta.predict_mean(&xa).unwrap();
        v += 0.2 * u.accel;
    }
    let last = plan.states[3];
    assert!((last.x - x).abs() < 1e-12 && (last.y - y).abs() < 1e-12);
    assert!((last.theta - th).abs() < 1e-12 && (last.v - v).abs() < 1e-12);
}

#[test]
fn on_reference_zero_input_costs_nothing() {
    let models = GpDynamics::prior(default_kernels());
    let start = VehicleState::new(2.0, 3.0, 0.0, 0.0);
    let mut problem = problem_for(&models, start, 4, 0.0);
    problem.reference = vec![[2.0, 3.0]; 4];
    let plan = simulate_gp_rollout(&models, &[ControlInput::default(); 4], &start, 0.2);
    let cost = exact_penalty_cost(&problem, &plan).unwrap();
    assert_eq!(cost.total, 0.0);
    assert_eq!(cost.penalty, 0.0);
}

#[test]
fn cost_matches_formula_re_evaluation() {
    let models = trained_models(4, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let start = VehicleState::new(0.0, 0.0, 0.3, 1.9);
    let controls = random_controls(&mut rng, 5);
    let mut problem = problem_for(&models, start, 5, 10.0);
    problem.corridor = Corridor::axis_box(5, [-0.2, 0.5], [-0.1, 0.1]);
    let plan = simulate_gp_rollout(&models, &controls, &start, 0.2);
    let cost = exact_penalty_cost(&problem, &plan).unwrap();

    let mut tracking = 0.0;
    let mut hinge = 0.0;
    for k in 0..5 {
        let s = plan.states[k + 1];
        let r = problem.reference[k];
        tracking += 100.0 * ((s.x - r[0]).powi(2) + (s.y - r[1]).powi(2));
        tracking += 0.1 * (controls[k].accel.powi(2) + controls[k].steer.powi(2));
        hinge += (s.x - 0.5).max(0.0) + (-0.2 - s.x).max(0.0) + (s.y - 0.1).max(0.0) + (-0.1 - s.y).max(0.0);
    }
    let (xp, xa) = plan.regressor_matrices();
    let logdet = |m: &crate::gp::GpModel, x: &nalgebra::DMatrix<f64>| {
        let mut s = predict(m, x).unwrap().covariance;
        let j = 1e-9 * s.trace() / s.nrows() as f64;
        for i in 0..s.nrows() {
            s[(i, i)] += j;
        }
        s.determinant().ln()
    };
    let ent = logdet(&models.dx, &xp) + logdet(&models.dy, &xp) + logdet(&models.dtheta, &xa);
    let expected = tracking - 10.0 * ent + 1e6 * hinge;
    assert!(hinge > 0.0);
    assert!((cost.total - expected).abs() <= 1e-8 * expected.abs().max(1.0));
}

#[test]
fn feasible_plan_has_no_penalty() {
    let models = trained_models(6, 30);
    let start = VehicleState::new(0.0, 0.0, 0.0, 1.0);
    let mut problem = problem_for(&models, start, 3, 0.0);
    problem.corridor = Corridor::axis_box(3, [-5.0, 5.0], [-5.0, 5.0]);
    let plan = simulate_gp_rollout(&models, &[ControlInput::new(0.1, 0.05); 3], &start, 0.2);
    assert_eq!(exact_penalty_cost(&problem, &plan).unwrap().penalty, 0.0);
}

#[test]
fn zero_perturbation_objective_equals_exact_cost() {
    let models = trained_models(7, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let start = VehicleState::new(0.0, 0.0, -0.4, 1.8);
    let controls = random_controls(&mut rng, 5);
    let mut problem = problem_for(&models, start, 5, 10.0);
    problem.corridor = Corridor::axis_box(5, [-0.3, 0.4], [-0.2, 0.2]);
    let plan = simulate_gp_rollout(&models, &controls, &start, 0.2);
    let sub = build_subproblem(&problem, &plan, 0.1).unwrap();
    let z = zero_point(&sub);
    let exact = exact_penalty_cost(&problem, &plan).unwrap().total;
    assert!((sub.qp.objective(&z) - exact).abs() <= 1e-9 * exact.abs().max(1.0));
    assert!((&sub.qp.a_eq * &z - &sub.qp.b_eq).amax() < 1e-12);
}

#[test]
fn zero_radius_returns_nominal_cost() {
    let models = trained_models(9, 30);
    let start = VehicleState::new(0.0, 0.0, 0.2, 1.0);
    let mut problem = problem_for(&models, start, 5, 10.0);
    problem.corridor = Corridor::axis_box(5, [-1.0, 1.0], [-0.05, 0.05]);
    let plan = simulate_gp_rollout(&models, &[ControlInput::new(0.3, 0.2); 5], &start, 0.2);
    let sub = build_subproblem(&problem, &plan, 0.0).unwrap();
    let sol = solve_qp(&sub.qp, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Solved);
    assert!(sol.primal.rows(0, sub.layout.core_len()).amax() < 1e-6);
    let exact = exact_penalty_cost(&problem, &plan).unwrap().total;
    assert!((sol.objective - exact).abs() <= 1e-6 * exact.abs().max(1.0));
}

#[test]
fn tracking_subproblem_satisfies_kkt() {
    let models = trained_models(10, 50);
    let start = VehicleState::new(0.0, 0.0, 0.0, 1.0);
    let problem = problem_for(&models, start, 5, 0.0);
    let plan = simulate_gp_rollout(&models, &[ControlInput::default(); 5], &start, 0.2);
    let sub = build_subproblem(&problem, &plan, 0.1).unwrap();
    let sol = solve_qp(&sub.qp, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Solved);
    assert!(kkt_residuals(&sub.qp, &sol).max() <= 1e-6);
}

#[test]
fn two_step_matrices_match_hand_assembly() {
    let models = trained_models(11, 25);
    let start = VehicleState::new(0.1, -0.2, 0.6, 0.8);
    let controls = vec![ControlInput::new(0.4, 0.1), ControlInput::new(-0.2, -0.3)];
    let mut problem = problem_for(&models, start, 2, 0.0);
    problem.corridor = Corridor {
        steps: vec![vec![], vec![HalfPlane { normal: [0.0, 1.0], offset: 1.0 }]],
    };
    let plan = simulate_gp_rollout(&models, &controls, &start, 0.2);
    let rho = 0.05;
    let sub = build_subproblem(&problem, &plan, rho).unwrap();
    let qp = &sub.qp;

    // Δa0 Δα0 Δa1 Δα1 | x1 y1 θ1 v1 x2 y2 θ2 v2 | ex0 ey0 et0 ex1 ey1 et1 | corridor slack
    assert_eq!(qp.num_vars(), 18 + 1);
    assert_eq!(qp.a_eq.nrows(), 14);
    assert_eq!(qp.a_in.nrows(), 5);

    // Quadratic cost: 2R on controls, 2Q on positions, nothing else.
    let mut p = nalgebra::DMatrix::<f64>::zeros(19, 19);
    for i in 0..4 {
        p[(i, i)] = 0.2;
    }
    for i in [4, 5, 8, 9] {
        p[(i, i)] = 200.0;
    }
    assert_eq!(qp.p, p);

    let mut q = DVector::<f64>::zeros(19);
    q[0] = 0.2 * 0.4;
    q[1] = 0.2 * 0.1;
    q[2] = 0.2 * -0.2;
    q[3] = 0.2 * -0.3;
    q[4] = 200.0 * (plan.states[1].x - problem.reference[0][0]);
    q[5] = 200.0 * (plan.states[1].y - problem.reference[0][1]);
    q[8] = 200.0 * (plan.states[2].x - problem.reference[1][0]);
    q[9] = 200.0 * (plan.states[2].y - problem.reference[1][1]);
    q[18] = 1e6;
    assert!((&qp.q - &q).amax() < 1e-12);

    // Second-step linearized Δx mean: ex1 = g·[−sin θ1 Δθ1, cos θ1 Δθ1, Δv1, Δα1].
    let g = mean_gradient(&models.dx, &plan.regressors_p[1]).unwrap();
    let (sin, cos) = plan.states[1].theta.sin_cos();
    let row = (0..14).find(|&r| qp.a_eq[(r, 15)] == 1.0).unwrap();
    assert!((qp.a_eq[(row, 6)] + (-g[0] * sin + g[1] * cos)).abs() < 1e-14);
    assert!((qp.a_eq[(row, 7)] + g[2]).abs() < 1e-14);
    assert!((qp.a_eq[(row, 3)] + g[3]).abs() < 1e-14);
    // Speed recursion v2 = v1 + dt·Δa1.
    let row = (0..14).find(|&r| qp.a_eq[(r, 11)] == 1.0).unwrap();
    assert_eq!(qp.a_eq[(row, 7)], -1.0);
    assert_eq!(qp.a_eq[(row, 2)], -0.2);

    // Trust region and input bounds.
    assert_eq!(qp.lower[0], -rho);
    assert!((qp.upper[3] - rho).abs() < 1e-15);
    assert_eq!((qp.lower[6], qp.upper[6]), (-rho, rho));
    assert_eq!((qp.lower[10], qp.upper[10]), (f64::NEG_INFINITY, f64::INFINITY));

    // Hard speed bounds on v2: Δv2 ≤ 2 − v2★ and −Δv2 ≤ v2★.
    assert_eq!(qp.a_in[(2, 11)], 1.0);
    assert!((qp.b_in[2] - (2.0 - plan.states[2].v)).abs() < 1e-15);
    assert_eq!(qp.a_in[(3, 11)], -1.0);
    assert!((qp.b_in[3] - plan.states[2].v).abs() < 1e-15);
    assert_eq!(qp.a_in.row(2).iter().filter(|&&a| a != 0.0).count(), 1);

    // Corridor hinge on y2: y2 − s ≤ 1 − y2★.
    let row = 4;
    assert_eq!(qp.a_in[(row, 9)], 1.0);
    assert_eq!(qp.a_in[(row, 18)], -1.0);
    assert!((qp.b_in[row] - (1.0 - plan.states[2].y)).abs() < 1e-15);
}

#[test]
fn bounds_clip_trust_region_near_input_limits() {
    let models = trained_models(12, 20);
    let start = VehicleState::new(0.0, 0.0, 0.0, 1.0);
    let problem = problem_for(&models, start, 1, 0.0);
    let plan = simulate_gp_rollout(&models, &[ControlInput::new(1.95, -FRAC_PI_4)], &start, 0.2);
    let sub = build_subproblem(&problem, &plan, 0.1).unwrap();
    assert!((sub.qp.upper[0] - 0.05).abs() < 1e-12);
    assert_eq!(sub.qp.lower[1], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rollout_is_consistent(seed in 0u64..10_000, h in 1usize..7) {
        let models = trained_models(13, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let controls = random_controls(&mut rng, h);
        let start = VehicleState::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-3.0..3.0), 1.0);
        let plan = simulate_gp_rollout(&models, &controls, &start, 0.2);
        for k in 0..h {
            let (s, n) = (plan.states[k], plan.states[k + 1]);
            prop_assert_eq!(n.x, s.x + plan.outputs[k][0]);
            prop_assert_eq!(n.theta, s.theta + plan.outputs[k][2]);
            prop_assert_eq!(n.v, s.v + 0.2 * controls[k].accel);
            let (xp, xa) = regressors_raw(s.theta, s.v, controls[k].steer);
            prop_assert_eq!(xp, plan.regressors_p[k]);
            prop_assert_eq!(xa, plan.regressors_a[k]);
        }
    }
}
