use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rhalc::checks::{gradient_suite, qp_suite, CheckOutcome};
use rhalc::runner::{metrics_for_saved, metrics_json, run_seed, summary, write_seed, RunConfig};
use rhalc::scenario::GridSpec;
use rhalc::Error;

#[derive(Parser)]
#[command(name = "rhalc", version, about = "Receding-horizon active learning and control with GP dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario for every seed and write artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the seed list from the config (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Replaces the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds run in parallel on this many threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Record wall-clock solve times in trajectory.csv and summary.json.
        #[arg(long)]
        timing: bool,
    },
    /// Validation metrics of saved models.
    Metrics {
        /// Directory with dx.gp, dy.gp and dtheta.gp.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "model")]
        label: String,
        /// Take the grid settings from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic GP and entropy derivatives.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// QP solver against enumeration and KKT oracles.
    Qpcheck {
        #[arg(long, default_value_t = 30)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config_error(e: &Error) -> bool {
    matches!(e, Error::Parse { .. } | Error::Config(_))
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    if config_error(&e) {
        ExitCode::from(2)
    } else {
        ExitCode::FAILURE
    }
}

fn report(outcomes: &[CheckOutcome]) -> ExitCode {
    for o in outcomes {
        println!(
            "{} {} instances={} worst={:.3e} tolerance={:.1e}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.instances,
            o.worst,
            o.tolerance
        );
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(config: PathBuf, seeds: Vec<u64>, out: Option<PathBuf>, workers: usize, timing: bool) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&config)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg.record_timing |= timing;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<String, Error>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let run = run_seed(&cfg, seed)?;
                write_seed(&cfg.output_dir.join(format!("seed_{seed}")), &run, cfg.record_timing)?;
                Ok(serde_json::to_string(&summary(&run, cfg.record_timing))?)
            })
            .collect()
    });
    let mut first_error = None;
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

fn metrics(models: PathBuf, label: String, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Error> {
    let grid = match config {
        Some(path) => RunConfig::load(&path)?.grid,
        None => GridSpec::default(),
    };
    let text = metrics_json(&metrics_for_saved(&models, &label, &grid)?)?;
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seeds,
            out,
            workers,
            timing,
        } => run(config, seeds, out, workers, timing),
        Command::Metrics { models, label, config, out } => metrics(models, label, config, out),
        Command::Gradcheck { instances, seed } => {
            return gradient_suite(instances, 4, 30, 3, seed).map_or_else(fail, |o| report(&o));
        }
        Command::Qpcheck { instances, seed } => {
            return qp_suite(instances, seed).map_or_else(fail, |o| report(&o));
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
