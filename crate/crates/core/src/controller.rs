//! Receding-horizon loop: corridor construction, per-step planning, applying
//! the first control to the simulated vehicle, and online model updates.

use std::time::Duration;
#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::GpDynamics;
use crate::error::{Error, Result};
use crate::gp::FitOptions;
use crate::qp::QpSettings;
use crate::rhalc::{ControlBounds, Corridor, HalfPlane, HorizonPlan, ObjectiveWeights, Penalties, RhalcProblem};
use crate::scp::{solve_rhalc, ScpConfig, ScpState};
use crate::track::Track;
use crate::vehicle::{observe_noisy, step_truth, ControlInput, StepObservation, VehicleParams, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub weights: ObjectiveWeights,
    pub bounds: ControlBounds,
    pub penalties: Penalties,
    pub horizon: usize,
    pub dt: f64,
    /// Speed used to space reference points along the centerline.
    pub target_speed: f64,
    /// Hyperparameters are refitted whenever this many samples have been
    /// collected since the episode started (0 disables refits).
    pub refit_every: usize,
    /// Corridor half-width is the track half-width minus this margin.
    pub corridor_margin: f64,
    #[serde(skip)]
    pub scp: ScpConfig,
    #[serde(skip)]
    pub qp: QpSettings,
    #[serde(skip)]
    pub fit: FitOptions,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            weights: ObjectiveWeights::default(),
            bounds: ControlBounds::default(),
            penalties: Penalties::default(),
            horizon: 5,
            dt: 0.2,
            target_speed: 1.5,
            refit_every: 10,
            corridor_margin: 0.15,
            scp: ScpConfig::default(),
            qp: QpSettings::default(),
            fit: FitOptions::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if w.position.iter().chain(&w.input).any(|v| !(*v >= 0.0)) || !(w.gamma >= 0.0) {
            return Err(Error::Config("weights must be nonnegative".into()));
        }
        let b = &self.bounds;
        for (name, r) in [("speed", b.speed), ("accel", b.accel), ("steer", b.steer)] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} bounds are empty: {r:?}")));
            }
        }
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("horizon and sampling time must be positive".into()));
        }
        if !(b.speed[0]..=b.speed[1]).contains(&self.target_speed) {
            return Err(Error::Config(format!("target speed {} outside speed bounds", self.target_speed)));
        }
        if !(self.corridor_margin >= 0.0) {
            return Err(Error::Config("corridor margin must be nonnegative".into()));
        }
        if !(self.penalties.inequality > 0.0 && self.penalties.equality > 0.0) {
            return Err(Error::Config("penalty weights must be positive".into()));
        }
        self.scp.validate()
    }
}

/// Where the vehicle drives.
#[derive(Debug, Clone, PartialEq)]
pub enum Arena {
    Track(Track),
    /// Obstacle-free rectangle `[x_min, x_max] × [y_min, y_max]`.
    FreeSpace { x: [f64; 2], y: [f64; 2] },
}

/// Two half-planes per step, parallel to the centerline tangent at the
/// reference arc lengths `s_refs` and `half_width` to either side.
pub fn build_corridor(track: &Track, s_refs: &[f64], half_width: f64) -> Corridor {
    let steps = s_refs
        .iter()
        .map(|&s| {
            let c = track.extended_point(s);
            let t = track.smooth_tangent(s).unwrap_or_else(|| track.segment_tangent(s));
            let n = [-t[1], t[0]];
            let nc = n[0] * c[0] + n[1] * c[1];
            vec![
                HalfPlane { normal: n, offset: nc + half_width },
                HalfPlane {
                    normal: [-n[0], -n[1]],
                    offset: -nc + half_width,
                },
            ]
        })
        .collect();
    Corridor { steps }
}

/// Outcome of one planning call.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub control: ControlInput,
    pub plan: Option<HorizonPlan>,
    pub scp: Option<ScpState>,
    /// The SCP solver stalled and the braking fallback was applied.
    pub fallback: bool,
    pub corridor: Corridor,
    /// Track borders (or the free-space box) at the first step, without margin.
    pub border: Vec<HalfPlane>,
    pub reference: Vec<[f64; 2]>,
    pub solve_time: Duration,
}

/// Stateful receding-horizon planner: keeps the previous solution for warm
/// starts and the arc-length position on the track.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    arena: Arena,
    previous: Option<Vec<ControlInput>>,
    progress: Option<f64>,
}

const PROJECTION_WINDOW: f64 = 2.0;

impl Controller {
    pub fn new(config: ControllerConfig, arena: Arena) -> Result<Self> {
        config.validate()?;
        if let Arena::Track(track) = &arena {
            if config.corridor_margin >= track.half_width() {
                return Err(Error::Config("corridor margin leaves no drivable width".into()));
            }
        }
        Ok(Self {
            config,
            arena,
            previous: None,
            progress: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Drops the information term once no more data will be collected.
    pub fn freeze_learning(&mut self) {
        self.config.weights.gamma = 0.0;
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    /// Arc length of `p` on the track, searched near the last known position.
    pub fn locate(&mut self, p: [f64; 2]) -> Option<crate::track::Projection> {
        let Arena::Track(track) = &self.arena else {
            return None;
        };
        let pr = track.project(p, self.progress.map(|s| (s, PROJECTION_WINDOW)));
        self.progress = Some(pr.s);
        Some(pr)
    }

    fn warm_start(&self) -> Vec<ControlInput> {
        let h = self.config.horizon;
        match &self.previous {
            Some(prev) => {
                let mut w: Vec<ControlInput> = prev.iter().skip(1).copied().collect();
                let last = *prev.last().expect("non-empty plan");
                w.resize(h, last);
                w
            }
            None => vec![self.config.bounds.clamp(ControlInput::new(0.0, 0.0)); h],
        }
    }

    fn targets(&mut self, state: &VehicleState) -> (Vec<[f64; 2]>, Corridor, Vec<HalfPlane>) {
        let h = self.config.horizon;
        match self.arena.clone() {
            Arena::Track(track) => {
                let s0 = self.locate(state.position()).expect("track arena").s;
                let ds = self.config.target_speed * self.config.dt;
                let s_refs: Vec<f64> = (1..=h).map(|k| s0 + ds * k as f64).collect();
                let reference = s_refs.iter().map(|&s| track.extended_point(s)).collect();
                let corridor = build_corridor(&track, &s_refs, track.half_width() - self.config.corridor_margin);
                let border = build_corridor(&track, &s_refs[..1], track.half_width()).steps.remove(0);
                (reference, corridor, border)
            }
            Arena::FreeSpace { x, y } => {
                let corridor = Corridor::axis_box(h, x, y);
                let border = corridor.steps[0].clone();
                (vec![state.position(); h], corridor, border)
            }
        }
    }

    /// Solves the receding-horizon problem at `state` and returns the first
    /// control. A stalled solver yields the braking fallback.
    pub fn plan_step(&mut self, state: &VehicleState, models: &GpDynamics) -> Result<StepPlan> {
        let (reference, corridor, border) = self.targets(state);
        let cfg = &self.config;
        let problem = RhalcProblem {
            models,
            initial: *state,
            reference: reference.clone(),
            corridor: corridor.clone(),
            weights: cfg.weights,
            bounds: cfg.bounds,
            penalties: cfg.penalties,
            dt: cfg.dt,
        };
        let warm = self.warm_start();
        let started = Instant::now();
        let outcome = solve_rhalc(&problem, &cfg.scp, &cfg.qp, &warm);
        let solve_time = started.elapsed();
        match outcome {
            Ok((controls, plan, scp)) => {
                let control = controls[0];
                self.previous = Some(controls);
                Ok(StepPlan {
                    control,
                    plan: Some(plan),
                    scp: Some(scp),
                    fallback: false,
                    corridor,
                    border,
                    reference,
                    solve_time,
                })
            }
            Err(Error::SolverStalled { iterations, .. }) => {
                log::warn!("solver stalled after {iterations} iterations; braking");
                self.previous = None;
                Ok(StepPlan {
                    control: braking_fallback(state, &cfg.bounds, cfg.dt),
                    plan: None,
                    scp: None,
                    fallback: true,
                    corridor,
                    border,
                    reference,
                    solve_time,
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// Strongest deceleration that keeps the speed at or above its lower bound,
/// with zero steering.
pub fn braking_fallback(state: &VehicleState, bounds: &ControlBounds, dt: f64) -> ControlInput {
    let to_min = (bounds.speed[0] - state.v) / dt;
    let accel = bounds.accel[0].max(to_min).min(bounds.accel[1]);
    bounds.clamp(ControlInput::new(accel, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateStatus {
    Appended,
    /// Appended and hyperparameters refitted.
    Refitted,
    /// Appended, but the refit failed and the previous hyperparameters were kept.
    RefitFailed,
    /// Factorization with the new point failed; the point was discarded.
    Dropped,
}

/// Adds one observation to the three GP datasets. `collected` counts samples
/// gathered in the episode including this one; refits happen on multiples of
/// `config.refit_every`.
pub fn update_dataset<R: Rng + ?Sized>(
    models: &GpDynamics,
    obs: &StepObservation,
    collected: usize,
    config: &ControllerConfig,
    rng: &mut R,
) -> Result<(GpDynamics, UpdateStatus)> {
    let finite = [obs.dx, obs.dy, obs.dtheta]
        .iter()
        .chain(&obs.gp_input_p)
        .chain(&obs.gp_input_a)
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Domain("observation contains non-finite values".into()));
    }
    let appended = match models.with_observation(obs) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("dropping observation: {e}");
            return Ok((models.clone(), UpdateStatus::Dropped));
        }
    };
    if config.refit_every > 0 && collected % config.refit_every == 0 {
        match appended.refit(&config.fit, rng) {
            Ok(m) => return Ok((m, UpdateStatus::Refitted)),
            Err(e) => {
                log::warn!("hyperparameter refit failed: {e}");
                return Ok((appended, UpdateStatus::RefitFailed));
            }
        }
    }
    Ok((appended, UpdateStatus::Appended))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub arena: Arena,
    pub initial: VehicleState,
    pub max_steps: usize,
    /// Samples to collect before learning is frozen (0: frozen throughout).
    pub learn_samples: usize,
    /// Observation noise standard deviations for (Δx, Δy, Δθ).
    pub noise: [f64; 3],
    /// Stop once a lap is complete and learning is over.
    pub stop_on_lap: bool,
    pub params: VehicleParams,
}

/// State at time `t` and the control applied from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub a: Option<f64>,
    pub alpha: Option<f64>,
    pub solve_ms: Option<f64>,
    /// The state reached with this control lies outside the first-step borders.
    pub violated: bool,
}

/// Per-solve diagnostics, one line of the solver log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub step: usize,
    pub fallback: bool,
    pub update: Option<UpdateStatus>,
    pub scp: Option<ScpState>,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trajectory: Vec<TrajectoryRow>,
    pub solves: Vec<SolveRecord>,
    pub solve_times: Vec<Duration>,
    pub models: GpDynamics,
    pub observations: Vec<StepObservation>,
    pub lap_complete: bool,
    pub crashed: bool,
    pub violations: usize,
    pub samples_collected: usize,
    pub fallbacks: usize,
}

impl EpisodeResult {
    pub fn steps(&self) -> usize {
        self.solves.len()
    }

    pub fn median_solve_ms(&self) -> Option<f64> {
        let mut ms: Vec<f64> = self.solve_times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        if ms.is_empty() {
            return None;
        }
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        Some(if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) })
    }

    pub fn mean_solve_ms(&self) -> Option<f64> {
        let n = self.solve_times.len();
        (n > 0).then(|| self.solve_times.iter().map(|d| d.as_secs_f64() * 1e3).sum::<f64>() / n as f64)
    }
}

/// Runs the closed loop from `spec.initial`. Randomness (observation noise,
/// refit restarts) comes from `rng` only, so a seeded generator makes the
/// episode deterministic.
pub fn run_episode<R: Rng + ?Sized>(
    spec: &EpisodeSpec,
    config: &ControllerConfig,
    models: GpDynamics,
    rng: &mut R,
) -> Result<EpisodeResult> {
    let mut controller = Controller::new(config.clone(), spec.arena.clone())?;
    if spec.learn_samples == 0 {
        controller.freeze_learning();
    }
    let mut models = models;
    let mut state = spec.initial;
    let mut out = EpisodeResult {
        trajectory: Vec::new(),
        solves: Vec::new(),
        solve_times: Vec::new(),
        models: models.clone(),
        observations: Vec::new(),
        lap_complete: false,
        crashed: false,
        violations: 0,
        samples_collected: 0,
        fallbacks: 0,
    };
    let start_s = controller.locate(state.position()).map(|p| p.s);
    let mut travelled = 0.0;
    let mut last_s = start_s;

    for step in 0..spec.max_steps {
        let plan = controller.plan_step(&state, &models)?;
        let u = plan.control;
        let (next, truth) = step_truth(&state, &u, config.dt, &spec.params)?;
        let violated = plan.border.iter().any(|h| h.violation(next.position()) > 0.0);
        out.trajectory.push(TrajectoryRow {
            t: step as f64 * config.dt,
            x: state.x,
            y: state.y,
            theta: state.theta,
            v: state.v,
            a: Some(u.accel),
            alpha: Some(u.steer),
            solve_ms: Some(plan.solve_time.as_secs_f64() * 1e3),
            violated,
        });
        out.solve_times.push(plan.solve_time);
        out.violations += violated as usize;
        out.fallbacks += plan.fallback as usize;

        let mut update = None;
        if out.samples_collected < spec.learn_samples {
            let obs = observe_noisy(&truth, spec.noise, rng);
            out.samples_collected += 1;
            let (m, status) = update_dataset(&models, &obs, out.samples_collected, config, rng)?;
            models = m;
            out.observations.push(obs);
            update = Some(status);
            if out.samples_collected == spec.learn_samples {
                controller.freeze_learning();
            }
        }
        out.solves.push(SolveRecord {
            step,
            fallback: plan.fallback,
            update,
            scp: plan.scp,
        });
        state = next;

        if let Arena::Track(track) = &spec.arena {
            let pr = controller.locate(state.position()).expect("track arena");
            travelled += track.arc_delta(last_s.expect("located"), pr.s);
            last_s = Some(pr.s);
            if pr.lateral.abs() > track.half_width() {
                out.crashed = true;
                let row = out.trajectory.last_mut().expect("row pushed this step");
                if !row.violated {
                    row.violated = true;
                    out.violations += 1;
                }
                break;
            }
            if travelled >= track.length() {
                out.lap_complete = true;
            }
            if spec.stop_on_lap && out.lap_complete && out.samples_collected >= spec.learn_samples {
                break;
            }
        }
    }
    out.trajectory.push(TrajectoryRow {
        t: out.solves.len() as f64 * config.dt,
        x: state.x,
        y: state.y,
        theta: state.theta,
        v: state.v,
        a: None,
        alpha: None,
        solve_ms: None,
        violated: false,
    });
    out.models = models;
    Ok(out)
}
