use std::f64::consts::FRAC_PI_4;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhalc::controller::{run_episode, Arena, Controller, ControllerConfig, EpisodeSpec};
use rhalc::dynamics::GpDynamics;
use rhalc::rhalc::ControlBounds;
use rhalc::scenario::{historical_data, initial_models};
use rhalc::track::Track;
use rhalc::vehicle::{ControlInput, VehicleParams, VehicleState, DEFAULT_OBSERVATION_NOISE};

fn models() -> GpDynamics {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let obs = historical_data(40, 0.1, DEFAULT_OBSERVATION_NOISE, &mut rng).unwrap();
    initial_models(&obs, &Default::default(), &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn planned_controls_respect_bounds(s in 0.0f64..20.0, d in -0.2f64..0.2, dh in -0.3f64..0.3, v in 0.0f64..2.0, gamma in 0.0f64..20.0) {
        let track = Track::oval();
        let (p, t) = track.point_at(s);
        let state = VehicleState::new(p[0] - d * t[1], p[1] + d * t[0], t[1].atan2(t[0]) + dh, v);
        let mut config = ControllerConfig::default();
        config.weights.gamma = gamma;
        let mut c = Controller::new(config, Arena::Track(track)).unwrap();
        let plan = c.plan_step(&state, &models()).unwrap();
        prop_assert!(plan.control.accel.abs() <= 2.0 && plan.control.steer.abs() <= FRAC_PI_4);
        if let Some(h) = plan.plan {
            for (u, s) in h.controls.iter().zip(&h.states[1..]) {
                prop_assert!(u.accel.abs() <= 2.0 && u.steer.abs() <= FRAC_PI_4);
                prop_assert!(s.v >= -1e-4 && s.v <= 2.0 + 1e-4);
            }
        }
    }

    #[test]
    fn speed_projection_keeps_speeds_in_bounds(v0 in 0.0f64..2.0, raw in proptest::collection::vec((-5.0f64..5.0, -1.0f64..1.0), 1..8)) {
        let b = ControlBounds::default();
        let controls: Vec<ControlInput> = raw.iter().map(|&(a, s)| ControlInput::new(a, s)).collect();
        let mut v = v0;
        for u in b.speed_feasible(&controls, v0, 0.2) {
            prop_assert!(u.accel >= b.accel[0] && u.accel <= b.accel[1]);
            v += 0.2 * u.accel;
            prop_assert!(v >= b.speed[0] - 1e-12 && v <= b.speed[1] + 1e-12);
        }
    }
}

#[test]
fn frozen_models_stay_bitwise_constant() {
    let m = models();
    let spec = EpisodeSpec {
        arena: Arena::Track(Track::oval()),
        initial: VehicleState::new(0.0, 0.0, 0.0, 1.0),
        max_steps: 8,
        learn_samples: 0,
        noise: DEFAULT_OBSERVATION_NOISE,
        stop_on_lap: false,
        params: VehicleParams::default(),
    };
    let r = run_episode(&spec, &ControllerConfig::default(), m.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(r.samples_collected, 0);
    assert!(r.solves.iter().all(|s| s.update.is_none()));
    for (a, b) in r.models.models().iter().zip(m.models()) {
        assert_eq!(a.inputs(), b.inputs());
        assert_eq!(a.targets(), b.targets());
        assert_eq!(a.kernel(), b.kernel());
    }
}

// The corridor is tightened by the margin and enforced by a penalty, so a plan
// may enter the margin band but not leave the track.
#[test]
fn planned_states_stay_on_the_track() {
    let m = models();
    let params = VehicleParams::default();
    let config = ControllerConfig::default();
    let margin = config.corridor_margin;
    let mut c = Controller::new(config, Arena::Track(Track::oval())).unwrap();
    let mut state = VehicleState::new(0.0, 0.0, 0.0, 1.0);
    for _ in 0..10 {
        let step = c.plan_step(&state, &m).unwrap();
        let plan = step.plan.expect("solver did not stall");
        for (planes, s) in step.corridor.steps.iter().zip(&plan.states[1..]) {
            for h in planes {
                let v = h.violation([s.x, s.y]);
                assert!(v < margin, "planned state {v} m past the tightened corridor");
            }
        }
        state = rhalc::vehicle::step_truth(&state, &step.control, 0.2, &params).unwrap().0;
    }
}
