//! Experiment scenarios (offline design, randomized excitation, online
//! learning with and without the information term, racing with frozen models)
//! and the validation metrics used to compare the learned models.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{run_episode, update_dataset, Arena, ControllerConfig, EpisodeResult, EpisodeSpec, SolveRecord, TrajectoryRow};
use crate::dynamics::{default_kernels, GpDynamics};
use crate::error::{Error, Result};
use crate::gp::FitOptions;
use crate::track::Track;
use crate::vehicle::{
    observe_noisy, regressors, step_truth, ControlInput, StepObservation, VehicleParams, VehicleState, DEFAULT_OBSERVATION_NOISE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    OfflineOed,
    RandomizedExperiment,
    OnlineAl,
    OnlineNoal,
    RacingPhase,
}

impl ScenarioKind {
    /// Short label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::OfflineOed => "OE",
            Self::RandomizedExperiment => "RE",
            Self::OnlineAl => "AL",
            Self::OnlineNoal => "Non-AL",
            Self::RacingPhase => "racing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeSpace {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Historical samples the initial models are trained on.
    #[serde(default)]
    pub initial_points: usize,
    /// Samples collected during the episode.
    #[serde(default)]
    pub collection_steps: usize,
    /// Entropy weight; the tracking weights are zeroed for offline design.
    #[serde(default)]
    pub gamma: f64,
    /// Built-in track name (`oval`, `complex`) or path to a track file.
    #[serde(default)]
    pub track: Option<String>,
    #[serde(default)]
    pub free_space: Option<FreeSpace>,
    #[serde(default = "default_noise")]
    pub noise: [f64; 3],
    #[serde(default)]
    pub max_steps: usize,
    /// `[x, y, theta, v]`; on a track the default is the start of the centerline.
    #[serde(default)]
    pub initial_state: Option<[f64; 4]>,
}

fn default_noise() -> [f64; 3] {
    DEFAULT_OBSERVATION_NOISE
}

impl ScenarioSpec {
    /// Default setup for each scenario kind.
    pub fn preset(kind: ScenarioKind) -> Self {
        let base = Self {
            kind,
            initial_points: 0,
            collection_steps: 0,
            gamma: 0.0,
            track: None,
            free_space: None,
            noise: DEFAULT_OBSERVATION_NOISE,
            max_steps: 0,
            initial_state: None,
        };
        let free = Some(FreeSpace {
            x: [-10.0, 10.0],
            y: [-10.0, 10.0],
        });
        match kind {
            ScenarioKind::OfflineOed => Self {
                initial_points: 25,
                collection_steps: 50,
                gamma: 10.0,
                free_space: free,
                max_steps: 50,
                initial_state: Some([0.0, 0.0, 0.0, 1.0]),
                ..base
            },
            ScenarioKind::RandomizedExperiment => Self {
                initial_points: 25,
                collection_steps: 50,
                max_steps: 50,
                initial_state: Some([0.0, 0.0, 0.0, 1.0]),
                ..base
            },
            ScenarioKind::OnlineAl | ScenarioKind::OnlineNoal => Self {
                initial_points: 50,
                collection_steps: 100,
                gamma: if kind == ScenarioKind::OnlineAl { 10.0 } else { 0.0 },
                track: Some("oval".into()),
                max_steps: 150,
                ..base
            },
            ScenarioKind::RacingPhase => Self {
                track: Some("complex".into()),
                max_steps: 150,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_track = matches!(self.kind, ScenarioKind::OnlineAl | ScenarioKind::OnlineNoal | ScenarioKind::RacingPhase);
        if needs_track && self.track.is_none() {
            return Err(Error::Config(format!("scenario {:?} requires a track", self.kind)));
        }
        if self.kind == ScenarioKind::OfflineOed && self.free_space.is_none() {
            return Err(Error::Config("offline design requires free-space bounds".into()));
        }
        if let Some(fs) = &self.free_space {
            if !(fs.x[0] < fs.x[1] && fs.y[0] < fs.y[1]) {
                return Err(Error::Config("free-space bounds are empty".into()));
            }
        }
        if self.noise.iter().any(|s| !(*s >= 0.0)) || !(self.gamma >= 0.0) {
            return Err(Error::Config("noise levels and gamma must be nonnegative".into()));
        }
        if self.collection_steps > self.max_steps {
            return Err(Error::Config(format!(
                "collection steps ({}) exceed the step limit ({})",
                self.collection_steps, self.max_steps
            )));
        }
        Ok(())
    }

    pub fn load_track(&self) -> Result<Option<Track>> {
        match &self.track {
            None => Ok(None),
            Some(name) => match Track::builtin(name) {
                Some(t) => Ok(Some(t)),
                None => Track::load(std::path::Path::new(name)).map(Some),
            },
        }
    }
}

/// Largest initial heading of the historical driver.
pub const HISTORICAL_HEADING: f64 = 0.5;

/// Samples recorded by a low-excitation driver: a gentle left circle at about
/// 1 m/s with small speed and steering oscillations, starting with heading
/// `heading`. Observations carry Gaussian noise `noise`.
pub fn historical_data<R: Rng + ?Sized>(n: usize, heading: f64, noise: [f64; 3], rng: &mut R) -> Result<Vec<StepObservation>> {
    let params = VehicleParams::default();
    let dt = 0.2;
    let mut state = VehicleState::new(0.0, 0.0, heading, 1.0);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let v_ref = 1.0 + 0.2 * (0.8 * t).sin();
        let accel = (2.0 * (v_ref - state.v)).clamp(-2.0, 2.0);
        let steer = 0.25 + 0.05 * (1.7 * t).sin();
        let (next, obs) = step_truth(&state, &ControlInput::new(accel, steer), dt, &params)?;
        out.push(observe_noisy(&obs, noise, rng));
        state = next;
    }
    Ok(out)
}

/// Models trained on `obs` with hyperparameters fitted by maximum likelihood.
pub fn initial_models<R: Rng + ?Sized>(obs: &[StepObservation], fit: &FitOptions, rng: &mut R) -> Result<GpDynamics> {
    let models = GpDynamics::from_observations(obs, default_kernels())?;
    if obs.is_empty() {
        return Ok(models);
    }
    models.refit(fit, rng)
}

/// Points of the validation grid with their noiseless one-step increments.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationGrid {
    pub points: usize,
    pub inputs_p: Vec<[f64; 4]>,
    pub truth_dx: Vec<f64>,
    pub truth_dy: Vec<f64>,
    pub inputs_a: Vec<[f64; 2]>,
    pub truth_dtheta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub points: usize,
    pub theta: [f64; 2],
    pub v: [f64; 2],
    pub steer: [f64; 2],
    pub dt: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 20,
            theta: [-PI, PI],
            v: [0.0, 2.0],
            steer: [-FRAC_PI_4, FRAC_PI_4],
            dt: 0.2,
        }
    }
}

fn linspace(r: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![r[0]];
    }
    (0..n).map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64).collect()
}

/// Linearly spaced grid over heading, speed and steering. Truth increments
/// come from the noiseless simulator with zero acceleration.
pub fn validation_grid(spec: &GridSpec) -> Result<ValidationGrid> {
    if spec.points == 0 {
        return Err(Error::Domain("validation grid needs at least one point per axis".into()));
    }
    let params = VehicleParams::default();
    let (thetas, speeds, steers) = (
        linspace(spec.theta, spec.points),
        linspace(spec.v, spec.points),
        linspace(spec.steer, spec.points),
    );
    let mut g = ValidationGrid {
        points: spec.points,
        inputs_p: Vec::new(),
        truth_dx: Vec::new(),
        truth_dy: Vec::new(),
        inputs_a: Vec::new(),
        truth_dtheta: Vec::new(),
    };
    for &theta in &thetas {
        for &v in &speeds {
            for &steer in &steers {
                let s = VehicleState::new(0.0, 0.0, theta, v);
                let u = ControlInput::new(0.0, steer);
                let (_, obs) = step_truth(&s, &u, spec.dt, &params)?;
                g.inputs_p.push(regressors(&s, &u).0);
                g.truth_dx.push(obs.dx);
                g.truth_dy.push(obs.dy);
            }
        }
    }
    for &v in &speeds {
        for &steer in &steers {
            let s = VehicleState::new(0.0, 0.0, 0.0, v);
            let u = ControlInput::new(0.0, steer);
            let (_, obs) = step_truth(&s, &u, spec.dt, &params)?;
            g.inputs_a.push(regressors(&s, &u).1);
            g.truth_dtheta.push(obs.dtheta);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerModel {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl PerModel {
    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub grid: GridSpec,
    pub rmse: PerModel,
    pub mae: PerModel,
}

fn errors(pred: impl Iterator<Item = f64>, truth: &[f64]) -> (f64, f64) {
    let (mut sq, mut max) = (0.0, 0.0f64);
    for (p, t) in pred.zip(truth) {
        let e = p - t;
        sq += e * e;
        max = max.max(e.abs());
    }
    ((sq / truth.len() as f64).sqrt(), max)
}

/// RMSE and maximum absolute error of each GP mean over the grid.
pub fn compute_metrics(models: &GpDynamics, grid: &ValidationGrid, spec: &GridSpec, label: &str) -> Result<MetricsReport> {
    if grid.inputs_p.is_empty() || grid.inputs_a.is_empty() {
        return Err(Error::Domain("validation grid is empty".into()));
    }
    let (rx, mx) = errors(grid.inputs_p.iter().map(|x| models.dx.mean_unchecked(x)), &grid.truth_dx);
    let (ry, my) = errors(grid.inputs_p.iter().map(|x| models.dy.mean_unchecked(x)), &grid.truth_dy);
    let (rt, mt) = errors(grid.inputs_a.iter().map(|x| models.dtheta.mean_unchecked(x)), &grid.truth_dtheta);
    Ok(MetricsReport {
        model: label.to_string(),
        grid: *spec,
        rmse: PerModel { dx: rx, dy: ry, dtheta: rt },
        mae: PerModel { dx: mx, dy: my, dtheta: mt },
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub initial_models: GpDynamics,
    pub models: GpDynamics,
    pub episode: EpisodeResult,
    pub track: Option<Track>,
}

fn initial_state(spec: &ScenarioSpec, track: Option<&Track>) -> VehicleState {
    if let Some([x, y, theta, v]) = spec.initial_state {
        return VehicleState::new(x, y, theta, v);
    }
    match track {
        Some(t) => {
            let (p, tan) = t.point_at(0.0);
            VehicleState::new(p[0], p[1], tan[1].atan2(tan[0]), 1.0)
        }
        None => VehicleState::new(0.0, 0.0, 0.0, 1.0),
    }
}

/// Uniform random controls within the input bounds, with the acceleration
/// range narrowed so the next speed stays within the speed bounds.
fn randomized_episode<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    config: &ControllerConfig,
    models: GpDynamics,
    rng: &mut R,
) -> Result<EpisodeResult> {
    let params = VehicleParams::default();
    let b = &config.bounds;
    let dt = config.dt;
    let mut state = initial_state(spec, None);
    let mut models = models;
    let mut trajectory = Vec::new();
    let mut solves = Vec::new();
    let mut observations = Vec::new();
    for step in 0..spec.collection_steps {
        let lo = b.accel[0].max((b.speed[0] - state.v) / dt);
        let hi = b.accel[1].min((b.speed[1] - state.v) / dt);
        let accel = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let steer = rng.random_range(b.steer[0]..=b.steer[1]);
        let u = ControlInput::new(accel, steer);
        let (next, truth) = step_truth(&state, &u, dt, &params)?;
        trajectory.push(TrajectoryRow {
            t: step as f64 * dt,
            x: state.x,
            y: state.y,
            theta: state.theta,
            v: state.v,
            a: Some(accel),
            alpha: Some(steer),
            solve_ms: None,
            violated: false,
        });
        let obs = observe_noisy(&truth, spec.noise, rng);
        let (m, status) = update_dataset(&models, &obs, step + 1, config, rng)?;
        models = m;
        observations.push(obs);
        solves.push(SolveRecord {
            step,
            fallback: false,
            update: Some(status),
            scp: None,
        });
        state = next;
    }
    trajectory.push(TrajectoryRow {
        t: spec.collection_steps as f64 * dt,
        x: state.x,
        y: state.y,
        theta: state.theta,
        v: state.v,
        a: None,
        alpha: None,
        solve_ms: None,
        violated: false,
    });
    Ok(EpisodeResult {
        trajectory,
        solves,
        solve_times: Vec::new(),
        models,
        observations,
        lap_complete: false,
        crashed: false,
        violations: 0,
        samples_collected: spec.collection_steps,
        fallbacks: 0,
    })
}

/// Runs one scenario. `given` supplies the models for the racing phase and
/// replaces the historical initial models otherwise.
pub fn run_scenario(spec: &ScenarioSpec, config: &ControllerConfig, seed: u64, given: Option<GpDynamics>) -> Result<ScenarioOutcome> {
    spec.validate()?;
    config.validate()?;
    let track = spec.load_track()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let initial = match given {
        Some(m) => m,
        None if spec.kind == ScenarioKind::RacingPhase => {
            return Err(Error::Config("the racing phase needs trained models".into()));
        }
        None => {
            let heading = data_rng.random_range(-HISTORICAL_HEADING..=HISTORICAL_HEADING);
            let obs = historical_data(spec.initial_points, heading, spec.noise, &mut data_rng)?;
            initial_models(&obs, &config.fit, &mut data_rng)?
        }
    };

    let mut cfg = config.clone();
    cfg.weights.gamma = spec.gamma;
    if spec.kind == ScenarioKind::OfflineOed {
        cfg.weights.position = [0.0, 0.0];
        cfg.weights.input = [0.0, 0.0];
    }

    let episode = if spec.kind == ScenarioKind::RandomizedExperiment {
        randomized_episode(spec, &cfg, initial.clone(), &mut rng)?
    } else {
        let arena = match (&track, &spec.free_space) {
            (Some(t), _) => Arena::Track(t.clone()),
            (None, Some(fs)) => Arena::FreeSpace { x: fs.x, y: fs.y },
            (None, None) => return Err(Error::Config("scenario needs a track or free-space bounds".into())),
        };
        let ep = EpisodeSpec {
            arena,
            initial: initial_state(spec, track.as_ref()),
            max_steps: spec.max_steps,
            learn_samples: spec.collection_steps,
            noise: spec.noise,
            stop_on_lap: track.is_some(),
            params: VehicleParams::default(),
        };
        run_episode(&ep, &cfg, initial.clone(), &mut rng)?
    };
    Ok(ScenarioOutcome {
        initial_models: initial,
        models: episode.models.clone(),
        episode,
        track,
    })
}
