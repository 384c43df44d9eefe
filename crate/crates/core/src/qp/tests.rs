use super::*;
use crate::checks::box_qp_enumeration;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn solve(p: &QpProblem) -> QpSolution {
    solve_qp(p, &QpSettings::default()).unwrap()
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut p = &m * m.transpose();
    for i in 0..n {
        p[(i, i)] += 0.1;
    }
    p
}

fn random_box_qp(rng: &mut ChaCha8Rng, n: usize) -> QpProblem {
    let p = random_pd(rng, n);
    let q = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let mut problem = QpProblem::unconstrained(p, q);
    for i in 0..n {
        let lo = rng.random_range(-1.5..0.0);
        problem.lower[i] = lo;
        problem.upper[i] = lo + rng.random_range(0.2..2.0);
    }
    problem
}

#[test]
fn unconstrained_closed_form() {
    let p = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
    let sol = solve(&QpProblem::unconstrained(p, DVector::from_vec(vec![-2.0, -4.0])));
    assert_eq!(sol.status, QpStatus::Solved);
    // −P⁻¹q
    assert!((sol.primal[0] - 1.0).abs() < 1e-6);
    assert!((sol.primal[1] - 2.0).abs() < 1e-6);
}

#[test]
fn one_dimensional_clamp() {
    // (z − 3)² = z² − 6z + 9
    let mut p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -6.0));
    p.constant = 9.0;
    p.lower[0] = 0.0;
    p.upper[0] = 1.0;
    let sol = solve(&p);
    assert_eq!(sol.status, QpStatus::Solved);
    assert!((sol.primal[0] - 1.0).abs() < 1e-6);
    assert!((sol.objective - 4.0).abs() < 1e-6);
    assert!(sol.dual_box[0] > 0.0);
}

#[test]
fn random_box_qps_match_enumeration() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_box_qp(&mut rng, 10);
        let sol = solve(&problem);
        assert_eq!(sol.status, QpStatus::Solved, "seed {seed}");
        let (_, f) = box_qp_enumeration(&problem.p, &problem.q, &problem.lower, &problem.upper);
        assert!((sol.objective - f).abs() < 1e-5, "seed {seed}: {} vs {f}", sol.objective);
    }
}

#[test]
fn equality_and_inequality_constraints() {
    // minimize z0² + z1² + z2² s.t. z0 + z1 + z2 = 3, z0 − z1 ≤ −1
    let p = DMatrix::from_diagonal(&DVector::from_element(3, 2.0));
    let mut problem = QpProblem::unconstrained(p, DVector::zeros(3));
    problem.a_eq = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
    problem.b_eq = DVector::from_element(1, 3.0);
    problem.a_in = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.0]);
    problem.b_in = DVector::from_element(1, -1.0);
    let sol = solve(&problem);
    assert_eq!(sol.status, QpStatus::Solved);
    // Active inequality with multiplier 1: z = (0.5, 1.5, 1).
    let expected = [0.5, 1.5, 1.0];
    for i in 0..3 {
        assert!((sol.primal[i] - expected[i]).abs() < 1e-6);
    }
    assert!(kkt_residuals(&problem, &sol).max() < 1e-6);
    assert!(sol.dual_in[0] > 0.0);
}

#[test]
fn linear_objective_with_hinge_slack() {
    // minimize 1e6 s + (z − 2)² s.t. z − 1 ≤ s, s ≥ 0: penalty forces z = 1.
    let mut problem = QpProblem::unconstrained(
        DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]),
        DVector::from_vec(vec![-4.0, 1e6]),
    );
    problem.constant = 4.0;
    problem.a_in = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    problem.b_in = DVector::from_element(1, 1.0);
    problem.lower[1] = 0.0;
    let sol = solve(&problem);
    assert_eq!(sol.status, QpStatus::Solved);
    assert!((sol.primal[0] - 1.0).abs() < 1e-6);
    assert!(sol.primal[1].abs() < 1e-6);
    assert!(kkt_residuals(&problem, &sol).max() < 1e-6);
}

#[test]
fn fixed_variables_via_equal_bounds() {
    let mut problem = random_box_qp(&mut ChaCha8Rng::seed_from_u64(3), 4);
    problem.lower[1] = 0.25;
    problem.upper[1] = 0.25;
    let sol = solve(&problem);
    assert_eq!(sol.status, QpStatus::Solved);
    assert!((sol.primal[1] - 0.25).abs() < 1e-6);
}

#[test]
fn max_iter_reports_best_iterate() {
    let problem = random_box_qp(&mut ChaCha8Rng::seed_from_u64(5), 6);
    let settings = QpSettings {
        max_iter: 1,
        polish: false,
        ..QpSettings::default()
    };
    let sol = solve_qp(&problem, &settings).unwrap();
    assert_eq!(sol.status, QpStatus::MaxIter);
    assert_eq!(sol.primal.len(), 6);
}

#[test]
fn rejects_inconsistent_problems() {
    let mut problem = random_box_qp(&mut ChaCha8Rng::seed_from_u64(7), 3);
    problem.lower[0] = 2.0;
    problem.upper[0] = 1.0;
    assert!(solve_qp(&problem, &QpSettings::default()).is_err());
    let mut problem = random_box_qp(&mut ChaCha8Rng::seed_from_u64(7), 3);
    problem.q[0] = f64::NAN;
    assert!(solve_qp(&problem, &QpSettings::default()).is_err());
}

#[test]
fn dump_round_trip() {
    let mut problem = random_box_qp(&mut ChaCha8Rng::seed_from_u64(9), 3);
    problem.upper[2] = f64::INFINITY;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qp.json");
    problem.dump(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back = serde_json::from_str::<QpDump>(&text).unwrap().into_problem().unwrap();
    assert_eq!(back, problem);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solved_problems_satisfy_kkt(seed in 0u64..10_000, n in 2usize..8, m in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut problem = random_box_qp(&mut rng, n);
        // Inequalities satisfied by the box midpoint keep the problem feasible.
        let mid = (&problem.lower + &problem.upper) * 0.5;
        problem.a_in = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        problem.b_in = &problem.a_in * &mid + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
        let sol = solve(&problem);
        prop_assert_eq!(sol.status, QpStatus::Solved);
        let kkt = kkt_residuals(&problem, &sol);
        prop_assert!(kkt.primal <= 1e-6 && kkt.stationarity <= 1e-6 && kkt.dual_sign <= 1e-6, "{:?}", kkt);
    }

    #[test]
    fn shrinking_box_never_lowers_optimum(seed in 0u64..10_000, factor in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let p = random_pd(&mut rng, n);
        let q = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let wide = {
            let mut pr = QpProblem::unconstrained(p.clone(), q.clone());
            pr.lower.fill(-1.0);
            pr.upper.fill(1.0);
            pr
        };
        let mut narrow = wide.clone();
        narrow.lower.fill(-factor);
        narrow.upper.fill(factor);
        let a = solve(&wide).objective;
        let b = solve(&narrow).objective;
        prop_assert!(b >= a - 1e-7);
    }
}

#[test]
fn degenerate_vertex_with_tiny_curvature() {
    // Optimum (0, 1) sits where x ≥ 0, y ≤ 1 and x + y ≤ 1 are all tight.
    let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2) * 1e-4, DVector::from_vec(vec![-1.0, -2.0]));
    p.a_in = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    p.b_in = DVector::from_element(1, 1.0);
    p.lower = DVector::zeros(2);
    p.upper = DVector::from_element(2, 1.0);
    let sol = solve(&p);
    assert_eq!(sol.status, QpStatus::Solved);
    assert!((sol.primal[0]).abs() < 1e-8 && (sol.primal[1] - 1.0).abs() < 1e-8);
    assert!((sol.objective - (-2.0 + 0.5e-4)).abs() < 1e-9);
    assert!(kkt_residuals(&p, &sol).max() <= 1e-6);
}

#[test]
fn large_penalty_slacks_polish_exactly() {
    // min (z − 3)² + 1e6·s  s.t.  z − s ≤ 1, s ≥ 0: the penalty is exact, z = 1.
    let mut p = QpProblem::unconstrained(
        DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]),
        DVector::from_vec(vec![-6.0, 1e6]),
    );
    p.constant = 9.0;
    p.a_in = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    p.b_in = DVector::from_element(1, 1.0);
    p.lower = DVector::from_vec(vec![f64::NEG_INFINITY, 0.0]);
    let sol = solve(&p);
    assert_eq!(sol.status, QpStatus::Solved);
    assert!((sol.primal[0] - 1.0).abs() < 1e-9 && sol.primal[1].abs() < 1e-12);
    assert!((sol.objective - 4.0).abs() < 1e-9);
    assert!((sol.dual_in[0] - 4.0).abs() < 1e-6);
}
