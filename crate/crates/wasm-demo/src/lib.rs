//! WebAssembly bindings for the browser demo in `www/`. Every export returns
//! JSON text; the Rust-side functions behind them are plain and testable.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use rhalc::controller::{update_dataset, Arena, Controller, ControllerConfig};
use rhalc::dynamics::GpDynamics;
use rhalc::gp::{build_model, fit_hyperparameters, predict, FitOptions, KernelParams};
use rhalc::scenario::{historical_data, initial_models, HISTORICAL_HEADING};
use rhalc::track::Track;
use rhalc::vehicle::{observe_noisy, step_truth, VehicleParams, VehicleState, DEFAULT_OBSERVATION_NOISE};
use rhalc::{Error, Result};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

#[derive(Serialize)]
struct TrackView {
    half_width: f64,
    closed: bool,
    length: f64,
    centerline: Vec<[f64; 2]>,
    left: Vec<[f64; 2]>,
    right: Vec<[f64; 2]>,
}

pub fn track_view(name: &str) -> Result<String> {
    let t = Track::builtin(name).ok_or_else(|| Error::Config(format!("unknown track {name:?}")))?;
    let (left, right) = t.borders();
    to_json(&TrackView {
        half_width: t.half_width(),
        closed: t.closed(),
        length: t.length(),
        centerline: t.centerline().to_vec(),
        left,
        right,
    })
}

/// Centerline and borders of a built-in track (`oval` or `complex`).
#[wasm_bindgen]
pub fn track_geometry(name: &str) -> std::result::Result<String, JsError> {
    track_view(name).map_err(js)
}

#[derive(Serialize)]
struct CurveView {
    x: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    signal_variance: f64,
    lengthscale: f64,
    noise_variance: f64,
}

pub fn gp_curve_view(xs: &[f64], ys: &[f64], range: [f64; 2], samples: usize, lengthscale: f64, noise_std: f64, fit: bool) -> Result<String> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs, {} targets", xs.len(), ys.len())));
    }
    let inputs = DMatrix::from_row_slice(1, xs.len(), xs);
    let targets = DVector::from_column_slice(ys);
    let mut kernel = KernelParams::new(1.0, vec![lengthscale], noise_std * noise_std)?;
    if fit && xs.len() >= 2 {
        kernel = fit_hyperparameters(&inputs, &targets, &kernel, &FitOptions::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let model = build_model(inputs, targets, kernel.clone())?;
    let n = samples.max(2);
    let x: Vec<f64> = (0..n).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64).collect();
    let p = predict(&model, &DMatrix::from_row_slice(1, n, &x))?;
    to_json(&CurveView {
        mean: p.mean.iter().copied().collect(),
        std: p.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        x,
        signal_variance: kernel.signal_variance,
        lengthscale: kernel.lengthscales[0],
        noise_variance: kernel.noise_variance,
    })
}

/// Posterior mean and standard deviation of a 1-D GP through the points
/// `(xs, ys)`, sampled at `samples` points of `[lo, hi]`. With `fit`, the
/// hyperparameters are fitted by maximum likelihood first.
#[wasm_bindgen]
pub fn gp_curve(
    xs: Vec<f64>,
    ys: Vec<f64>,
    lo: f64,
    hi: f64,
    samples: usize,
    lengthscale: f64,
    noise_std: f64,
    fit: bool,
) -> std::result::Result<String, JsError> {
    gp_curve_view(&xs, &ys, [lo, hi], samples, lengthscale, noise_std, fit).map_err(js)
}

#[derive(Serialize)]
pub struct StepView {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub accel: f64,
    pub steer: f64,
    /// Predicted positions over the horizon.
    pub plan: Vec<[f64; 2]>,
    pub reference: Vec<[f64; 2]>,
    pub samples: usize,
    pub learning: bool,
    pub fallback: bool,
    pub crashed: bool,
    pub laps: f64,
    pub solve_ms: f64,
}

/// Closed loop on a built-in track, one receding-horizon step at a time.
pub struct Drive {
    controller: Controller,
    models: GpDynamics,
    state: VehicleState,
    track: Track,
    config: ControllerConfig,
    rng: ChaCha8Rng,
    learn_samples: usize,
    collected: usize,
    steps: usize,
    travelled: f64,
    last_s: f64,
    crashed: bool,
}

impl Drive {
    pub fn new(track: &str, gamma: f64, learn_samples: usize, seed: u64) -> Result<Self> {
        let track = Track::builtin(track).ok_or_else(|| Error::Config(format!("unknown track {track:?}")))?;
        let mut config = ControllerConfig::default();
        config.weights.gamma = gamma;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heading = rand::Rng::random_range(&mut rng, -HISTORICAL_HEADING..=HISTORICAL_HEADING);
        let obs = historical_data(50, heading, DEFAULT_OBSERVATION_NOISE, &mut rng)?;
        let models = initial_models(&obs, &config.fit, &mut rng)?;
        let mut controller = Controller::new(config.clone(), Arena::Track(track.clone()))?;
        if learn_samples == 0 {
            controller.freeze_learning();
        }
        let (p, t) = track.point_at(0.0);
        let state = VehicleState::new(p[0], p[1], t[1].atan2(t[0]), 1.0);
        let last_s = controller.locate(p).map_or(0.0, |pr| pr.s);
        Ok(Self {
            controller,
            models,
            state,
            track,
            config,
            rng,
            learn_samples,
            collected: 0,
            steps: 0,
            travelled: 0.0,
            last_s,
            crashed: false,
        })
    }

    pub fn step(&mut self) -> Result<StepView> {
        if self.crashed {
            return Err(Error::Domain("the vehicle left the track".into()));
        }
        let plan = self.controller.plan_step(&self.state, &self.models)?;
        let (next, truth) = step_truth(&self.state, &plan.control, self.config.dt, &VehicleParams::default())?;
        if self.collected < self.learn_samples {
            let obs = observe_noisy(&truth, DEFAULT_OBSERVATION_NOISE, &mut self.rng);
            self.collected += 1;
            self.models = update_dataset(&self.models, &obs, self.collected, &self.config, &mut self.rng)?.0;
            if self.collected == self.learn_samples {
                self.controller.freeze_learning();
            }
        }
        self.state = next;
        self.steps += 1;
        let pr = self.controller.locate(next.position()).expect("track arena");
        self.travelled += self.track.arc_delta(self.last_s, pr.s);
        self.last_s = pr.s;
        self.crashed = pr.lateral.abs() > self.track.half_width();
        Ok(StepView {
            step: self.steps,
            x: next.x,
            y: next.y,
            theta: next.theta,
            v: next.v,
            accel: plan.control.accel,
            steer: plan.control.steer,
            plan: plan.plan.map(|p| p.states.iter().map(|s| [s.x, s.y]).collect()).unwrap_or_default(),
            reference: plan.reference,
            samples: self.models.len(),
            learning: self.collected < self.learn_samples,
            fallback: plan.fallback,
            crashed: self.crashed,
            laps: self.travelled / self.track.length(),
            solve_ms: plan.solve_time.as_secs_f64() * 1e3,
        })
    }
}

/// Browser handle around [`Drive`].
#[wasm_bindgen]
pub struct Simulator(Drive);

#[wasm_bindgen]
impl Simulator {
    /// Starts at the beginning of `track` with models trained on 50 historical
    /// samples. The first `learn_samples` steps add data and use entropy
    /// weight `gamma`.
    #[wasm_bindgen(constructor)]
    pub fn new(track: &str, gamma: f64, learn_samples: usize, seed: u32) -> std::result::Result<Simulator, JsError> {
        Drive::new(track, gamma, learn_samples, seed.into()).map(Simulator).map_err(js)
    }

    /// Advances one step and returns its [`StepView`] as JSON.
    pub fn step(&mut self) -> std::result::Result<String, JsError> {
        self.0.step().and_then(|v| to_json(&v)).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_view_lists_borders() {
        let v: serde_json::Value = serde_json::from_str(&track_view("oval").unwrap()).unwrap();
        let n = v["centerline"].as_array().unwrap().len();
        assert_eq!(v["left"].as_array().unwrap().len(), n);
        assert_eq!(v["half_width"], 0.5);
        assert!(track_view("nowhere").is_err());
    }

    #[test]
    fn gp_curve_passes_near_points() {
        let text = gp_curve_view(&[-1.0, 0.0, 1.0], &[0.5, -0.2, 0.3], [-1.0, 1.0], 3, 0.5, 1e-3, false).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mean: Vec<f64> = serde_json::from_value(v["mean"].clone()).unwrap();
        for (m, y) in mean.iter().zip([0.5, -0.2, 0.3]) {
            assert!((m - y).abs() < 1e-3);
        }
        assert!(gp_curve_view(&[0.0], &[], [0.0, 1.0], 5, 1.0, 0.1, false).is_err());
        assert!(gp_curve_view(&[0.0, 0.5, 1.0], &[0.0, 0.4, 0.8], [0.0, 1.0], 5, 1.0, 0.1, true).is_ok());

        let prior: serde_json::Value = serde_json::from_str(&gp_curve_view(&[], &[], [0.0, 1.0], 4, 1.0, 0.1, true).unwrap()).unwrap();
        let std: Vec<f64> = serde_json::from_value(prior["std"].clone()).unwrap();
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn drive_learns_then_freezes() {
        let mut d = Drive::new("oval", 10.0, 3, 1).unwrap();
        let first = d.step().unwrap();
        assert_eq!(first.samples, 51);
        assert_eq!(first.plan.len(), 6);
        for _ in 0..3 {
            d.step().unwrap();
        }
        let v = d.step().unwrap();
        assert_eq!(v.samples, 53);
        assert!(!v.learning && !v.crashed);
        assert!(v.laps > 0.0);
    }
}
