//! Run configuration and artifact writers shared by the command-line tool and
//! the acceptance suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, EpisodeResult};
use crate::dynamics::GpDynamics;
use crate::error::{Error, Result};
use crate::gp::HyperparameterBounds;
use crate::qp::QpSettings;
use crate::scenario::{compute_metrics, run_scenario, validation_grid, GridSpec, MetricsReport, ScenarioKind, ScenarioOutcome, ScenarioSpec};
use crate::scp::ScpConfig;
use crate::track::Track;

/// Scenario section: `kind` selects the preset, the other keys override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: Option<ScenarioKind>,
    pub initial_points: Option<usize>,
    pub collection_steps: Option<usize>,
    pub gamma: Option<f64>,
    pub track: Option<String>,
    pub free_space: Option<crate::scenario::FreeSpace>,
    pub noise: Option<[f64; 3]>,
    pub max_steps: Option<usize>,
    pub initial_state: Option<[f64; 4]>,
    /// Directory with `dx.gp`, `dy.gp`, `dtheta.gp` for the racing phase.
    pub models: Option<PathBuf>,
    /// Scenario run first (same seed) to produce the racing-phase models.
    pub train_with: Option<ScenarioKind>,
}

impl ScenarioSection {
    pub fn spec(&self) -> ScenarioSpec {
        let mut s = ScenarioSpec::preset(self.kind.unwrap_or(ScenarioKind::OnlineAl));
        if let Some(v) = self.initial_points {
            s.initial_points = v;
        }
        if let Some(v) = self.collection_steps {
            s.collection_steps = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
        if let Some(v) = &self.track {
            s.track = Some(v.clone());
        }
        if let Some(v) = self.free_space {
            s.free_space = Some(v);
        }
        if let Some(v) = self.noise {
            s.noise = v;
        }
        if let Some(v) = self.max_steps {
            s.max_steps = v;
        }
        if let Some(v) = self.initial_state {
            s.initial_state = Some(v);
        }
        s
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write wall-clock solve times into the trajectory and summary. Off by
    /// default so repeated runs produce identical files.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub scp: ScpConfig,
    #[serde(default)]
    pub qp: QpSettings,
    #[serde(default)]
    pub kernel_bounds: HyperparameterBounds,
    #[serde(default)]
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            output_dir: default_output(),
            record_timing: false,
            scenario: ScenarioSection::default(),
            controller: ControllerConfig::default(),
            scp: ScpConfig::default(),
            qp: QpSettings::default(),
            kernel_bounds: HyperparameterBounds::default(),
            grid: GridSpec::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl RunConfig {
    /// Parses a TOML document; `origin` names it in error locations.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("{origin}:{line}:{col}")
                }
                None => origin.to_string(),
            };
            Error::Parse {
                location,
                message: e.message().to_string(),
            }
        })
    }

    /// Reads and validates a configuration file. Relative model and track
    /// paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.scenario.models {
            if m.is_relative() {
                cfg.scenario.models = Some(base.join(m));
            }
        }
        if let Some(t) = &cfg.scenario.track {
            if Track::builtin(t).is_none() && Path::new(t).is_relative() {
                cfg.scenario.track = Some(base.join(t).display().to_string());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Controller settings with the solver and kernel sections folded in.
    pub fn controller_config(&self) -> ControllerConfig {
        let mut c = self.controller.clone();
        c.scp = self.scp;
        c.qp = self.qp;
        c.fit.bounds = self.kernel_bounds.clone();
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.scenario.kind.is_none() {
            return Err(Error::Config("scenario.kind is required".into()));
        }
        let spec = self.scenario.spec();
        spec.validate()?;
        spec.load_track()?;
        self.controller_config().validate()?;
        let racing = spec.kind == ScenarioKind::RacingPhase;
        match (&self.scenario.models, self.scenario.train_with) {
            (Some(_), Some(_)) => return Err(Error::Config("set either scenario.models or scenario.train_with, not both".into())),
            (None, None) if racing => {
                return Err(Error::Config("the racing phase needs scenario.models or scenario.train_with".into()));
            }
            (Some(dir), None) => {
                for name in crate::dynamics::MODEL_NAMES {
                    let file = dir.join(format!("{name}.gp"));
                    if !file.is_file() {
                        return Err(Error::Config(format!("model file {} does not exist", file.display())));
                    }
                }
            }
            (None, Some(ScenarioKind::RacingPhase)) => {
                return Err(Error::Config("racing-phase models cannot come from another racing phase".into()));
            }
            _ => {}
        }
        if self.grid.points == 0 {
            return Err(Error::Config("grid.points must be positive".into()));
        }
        Ok(())
    }
}

/// Everything produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub spec: ScenarioSpec,
    pub outcome: ScenarioOutcome,
    pub metrics: MetricsReport,
    /// Scenario that produced the racing-phase models, with its outcome.
    pub training: Option<(ScenarioKind, ScenarioOutcome, MetricsReport)>,
}

pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    let controller = config.controller_config();
    let spec = config.scenario.spec();
    let grid = validation_grid(&config.grid)?;
    let mut training = None;
    let given = match (&config.scenario.models, config.scenario.train_with) {
        (Some(dir), _) => Some(GpDynamics::load(dir)?),
        (None, Some(kind)) => {
            let out = run_scenario(&ScenarioSpec::preset(kind), &controller, seed, None)?;
            let report = compute_metrics(&out.models, &grid, &config.grid, kind.label())?;
            let models = out.models.clone();
            training = Some((kind, out, report));
            Some(models)
        }
        (None, None) => None,
    };
    let outcome = run_scenario(&spec, &controller, seed, given)?;
    let label = match (spec.kind, config.scenario.train_with) {
        (ScenarioKind::RacingPhase, Some(kind)) => kind.label(),
        (kind, _) => kind.label(),
    };
    let metrics = compute_metrics(&outcome.models, &grid, &config.grid, label)?;
    Ok(SeedRun {
        seed,
        spec,
        outcome,
        metrics,
        training,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `t,x,y,theta,v,a,alpha,solve_ms,violated`; `solve_ms` is left empty unless
/// `timing` is set.
pub fn trajectory_csv(episode: &EpisodeResult, timing: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "x", "y", "theta", "v", "a", "alpha", "solve_ms", "violated"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for r in &episode.trajectory {
        let ms = if timing { opt(r.solve_ms) } else { String::new() };
        w.write_record([
            r.t.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.theta.to_string(),
            r.v.to_string(),
            opt(r.a),
            opt(r.alpha),
            ms,
            (r.violated as u8).to_string(),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV of formatted numbers is UTF-8"))
}

/// Centerline and both borders, one row per centerline point.
pub fn borders_csv(track: &Track) -> String {
    let (left, right) = track.borders();
    let mut out = String::from("cx,cy,left_x,left_y,right_x,right_y\n");
    for ((c, l), r) in track.centerline().iter().zip(&left).zip(&right) {
        let _ = writeln!(out, "{},{},{},{},{},{}", c[0], c[1], l[0], l[1], r[0], r[1]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub steps: usize,
    pub lap_complete: bool,
    pub crashed: bool,
    pub violations: usize,
    pub fallbacks: usize,
    pub samples_collected: usize,
    pub dataset_size: usize,
    pub mean_solve_ms: Option<f64>,
    pub median_solve_ms: Option<f64>,
}

pub fn summary(run: &SeedRun, timing: bool) -> Summary {
    episode_summary(run.spec.kind, run.seed, &run.outcome, timing)
}

fn episode_summary(kind: ScenarioKind, seed: u64, outcome: &ScenarioOutcome, timing: bool) -> Summary {
    let e = &outcome.episode;
    Summary {
        scenario: kind,
        seed,
        steps: e.steps(),
        lap_complete: e.lap_complete,
        crashed: e.crashed,
        violations: e.violations,
        fallbacks: e.fallbacks,
        samples_collected: e.samples_collected,
        dataset_size: outcome.models.len(),
        mean_solve_ms: if timing { e.mean_solve_ms() } else { None },
        median_solve_ms: if timing { e.median_solve_ms() } else { None },
    }
}

pub fn metrics_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// One JSON object per solve.
pub fn scp_log(episode: &EpisodeResult) -> Result<String> {
    let mut out = String::new();
    for rec in &episode.solves {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

fn write_episode(dir: &Path, outcome: &ScenarioOutcome, metrics: &MetricsReport, summary: &Summary, timing: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trajectory.csv"), trajectory_csv(&outcome.episode, timing)?)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    std::fs::write(dir.join("metrics.json"), metrics_json(metrics)?)?;
    std::fs::write(dir.join("scp_log.jsonl"), scp_log(&outcome.episode)?)?;
    outcome.models.save(&dir.join("models"))?;
    if let Some(track) = &outcome.track {
        std::fs::write(dir.join("track.csv"), borders_csv(track))?;
    }
    Ok(())
}

/// Wall-clock information kept apart from the reproducible artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub finished_unix_s: u64,
    pub solve_ms: Vec<f64>,
}

/// Writes the artifacts of `run` into `dir` (created if needed). A training
/// scenario, if any, goes into `dir/training`.
pub fn write_seed(dir: &Path, run: &SeedRun, timing: bool) -> Result<()> {
    write_episode(dir, &run.outcome, &run.metrics, &summary(run, timing), timing)?;
    if let Some((kind, out, report)) = &run.training {
        let s = episode_summary(*kind, run.seed, out, timing);
        write_episode(&dir.join("training"), out, report, &s, timing)?;
    }
    let log = RunLog {
        seed: run.seed,
        finished_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        solve_ms: run.outcome.episode.solve_times.iter().map(|d| d.as_secs_f64() * 1e3).collect(),
    };
    std::fs::write(dir.join("run_log.json"), serde_json::to_string(&log)? + "\n")?;
    Ok(())
}

/// Metrics of models saved in `dir`.
pub fn metrics_for_saved(dir: &Path, label: &str, grid: &GridSpec) -> Result<MetricsReport> {
    let models = GpDynamics::load(dir)?;
    compute_metrics(&models, &validation_grid(grid)?, grid, label)
}
