#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fastslq::bench::run_bench;
use fastslq::config::{Config, DisturbanceConfig, ModelConfig};
use fastslq::linalg::Vector;
use fastslq::mpc::{run_closed_loop, ClosedLoopLog, ModelPlant, MpcState};
use fastslq::solver::{solve, BackwardMode, PhaseTimings, SolveReport};

const SUCCESS: u8 = 0;
const FAILURE: u8 = 1;
const NOT_CONVERGED: u8 = 2;

/// Band around the reference, as a fraction of the peak deviation, that
/// counts as recovered after a disturbance.
const RECOVERY_BAND: f64 = 0.05;

#[derive(Parser, Debug)]
#[command(name = "fastslq", version, about = "SLQ / FastSLQ optimal control and MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON problem configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; `bench` takes a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    threads: Vec<usize>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the sequential backward pass in every iteration.
    #[arg(long)]
    sequential_backward: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the configured fixed-horizon problem.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop MPC simulation.
    Mpc {
        #[command(flatten)]
        common: Common,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// State kick `time:index:delta`; repeatable.
        #[arg(long = "disturbance")]
        disturbances: Vec<DisturbanceConfig>,
        /// MPC update rate in Hz.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Partition/thread scaling benchmark on the planar model.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        partitions: Vec<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
}

type CliResult = Result<u8, String>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { FAILURE } else { SUCCESS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Solve { common } => cmd_solve(&common),
        Command::Mpc {
            common,
            duration,
            disturbances,
            rate,
        } => cmd_mpc(&common, duration, disturbances, rate),
        Command::Bench {
            common,
            partitions,
            repeats,
            warmup,
        } => cmd_bench(&common, partitions, repeats, warmup),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(FAILURE)
        }
    }
}

fn load(common: &Common) -> Result<Config, String> {
    let config = Config::load(&common.config).map_err(|e| e.to_string())?;
    fs::create_dir_all(&common.out).map_err(|e| format!("{}: {e}", common.out.display()))?;
    Ok(config)
}

fn single_thread_count(common: &Common) -> Result<Option<usize>, String> {
    match common.threads.as_slice() {
        [] => Ok(None),
        [k] if *k > 0 => Ok(Some(*k)),
        _ => Err("--threads takes one positive count here".into()),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, String> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), String> {
    let out = create(dir, name)?;
    serde_json::to_writer_pretty(out, value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    converged: bool,
    iterations: usize,
    final_cost: f64,
    max_constraint_violation: f64,
    threads: usize,
    parallel_backward: bool,
    seed: Option<u64>,
    total_timings: PhaseTimings,
    costs: &'a [f64],
    merits: &'a [f64],
    alphas: &'a [Option<f64>],
    modes: &'a [BackwardMode],
    timings: &'a [PhaseTimings],
}

fn cmd_solve(common: &Common) -> CliResult {
    let mut config = load(common)?;
    if let Some(k) = single_thread_count(common)? {
        config.solver.num_threads = k;
    }
    if common.sequential_backward {
        config.solver.parallel_backward = false;
    }
    let (problem, policy) = config.problem().map_err(|e| e.to_string())?;
    let outcome = solve(&problem, policy, &config.solver).map_err(|e| e.to_string())?;
    let report: &SolveReport = &outcome.report;

    outcome
        .trajectory
        .write_csv(create(&common.out, "trajectory.csv")?)
        .map_err(|e| e.to_string())?;
    write_json(
        &common.out,
        "report.json",
        &SolveSummary {
            converged: report.converged,
            iterations: report.iterations,
            final_cost: report.final_cost(),
            max_constraint_violation: problem.max_state_input_violation(&outcome.trajectory),
            threads: config.solver.num_threads,
            parallel_backward: config.solver.parallel_backward,
            seed: common.seed,
            total_timings: report.total_timings(),
            costs: &report.costs,
            merits: &report.merits,
            alphas: &report.alphas,
            modes: &report.modes,
            timings: &report.timings,
        },
    )?;
    println!(
        "{} after {} iterations, cost {:.9e}",
        if report.converged { "converged" } else { "not converged" },
        report.iterations,
        report.final_cost()
    );
    Ok(if report.converged { SUCCESS } else { NOT_CONVERGED })
}

#[derive(Serialize)]
struct Recovery {
    time: f64,
    index: usize,
    delta: f64,
    /// Largest tracking error after the kick.
    peak_deviation: f64,
    /// Seconds from the kick until the gait-cycle average of the tracking
    /// error stays inside the band; `None` if it never does.
    recovery_time: Option<f64>,
}

#[derive(Serialize)]
struct MpcSummary {
    completed: bool,
    error: Option<String>,
    simulated_time: f64,
    mpc_steps: usize,
    rejected_steps: usize,
    mean_latency_ms: f64,
    max_latency_ms: f64,
    mean_rate_hz: f64,
    /// Planar: CoM x minus the task reference; LTI: state norm.
    max_tracking_error: f64,
    final_tracking_error: f64,
    /// Tracking error averaged over the last gait cycle.
    final_cycle_mean_error: f64,
    recovery_band: f64,
    recoveries: Vec<Recovery>,
}

fn tracking_error(config: &Config, x: &Vector, t: f64) -> f64 {
    match (&config.model, config.planar_setup()) {
        (ModelConfig::Planar(_), Some(setup)) => {
            x[fastslq::models::planar::COM_X] - setup.task.com_reference(t)
        }
        _ => x.norm(),
    }
}

/// Mean of `errors` over the `window` seconds ending at each row.
fn trailing_means(times: &[f64], errors: &[f64], window: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut start = 0;
    let mut sum = 0.0;
    for (k, &t) in times.iter().enumerate() {
        sum += errors[k];
        while times[start] < t - window - 1e-9 {
            sum -= errors[start];
            start += 1;
        }
        out.push(sum / (k + 1 - start) as f64);
    }
    out
}

fn summarize(config: &Config, log: &ClosedLoopLog, kicks: &[DisturbanceConfig], cycle: f64) -> MpcSummary {
    let times: Vec<f64> = log.rows.iter().map(|r| r.t).collect();
    let errors: Vec<f64> = log.rows.iter().map(|r| tracking_error(config, &r.state, r.t)).collect();
    let means = trailing_means(&times, &errors, cycle);
    let latencies: Vec<f64> = log.steps.iter().map(|s| s.latency).collect();
    let mean_latency = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    let recoveries = kicks
        .iter()
        .map(|d| {
            let after: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= d.time).collect();
            let peak = after.iter().map(|&k| errors[k].abs()).fold(0.0, f64::max);
            let band = RECOVERY_BAND * peak;
            let last_outside = after.iter().rev().find(|&&k| means[k].abs() > band);
            let recovery_time = match last_outside {
                None => after.first().map(|&k| times[k] - d.time),
                Some(&k) if k + 1 < times.len() => Some(times[k + 1] - d.time),
                Some(_) => None,
            };
            Recovery {
                time: d.time,
                index: d.index,
                delta: d.delta,
                peak_deviation: peak,
                recovery_time,
            }
        })
        .collect();
    MpcSummary {
        completed: log.completed(),
        error: log.error.clone(),
        simulated_time: times.last().map_or(0.0, |t| t - times[0]),
        mpc_steps: log.steps.len(),
        rejected_steps: log.steps.iter().filter(|s| !s.accepted).count(),
        mean_latency_ms: 1e3 * mean_latency,
        max_latency_ms: 1e3 * latencies.iter().cloned().fold(0.0, f64::max),
        mean_rate_hz: if mean_latency > 0.0 { 1.0 / mean_latency } else { 0.0 },
        max_tracking_error: errors.iter().map(|e| e.abs()).fold(0.0, f64::max),
        final_tracking_error: errors.last().copied().unwrap_or(0.0),
        final_cycle_mean_error: means.last().copied().unwrap_or(0.0),
        recovery_band: RECOVERY_BAND,
        recoveries,
    }
}

fn cmd_mpc(
    common: &Common,
    duration: Option<f64>,
    disturbances: Vec<DisturbanceConfig>,
    rate: Option<f64>,
) -> CliResult {
    let mut config = load(common)?;
    if let Some(k) = single_thread_count(common)? {
        config.mpc.solver.num_threads = k;
    }
    if common.sequential_backward {
        config.mpc.solver.parallel_backward = false;
    }
    if let Some(d) = duration {
        config.closed_loop.duration = d;
    }
    if let Some(hz) = rate {
        if !(hz > 0.0) {
            return Err("--rate must be positive".into());
        }
        config.closed_loop.mpc_period = Some(1.0 / hz);
    }
    config.closed_loop.disturbances.extend(disturbances);

    let gait = config.gait().map_err(|e| e.to_string())?;
    let model = config.mpc_model().map_err(|e| e.to_string())?;
    let x0 = config.initial_state().map_err(|e| e.to_string())?;
    let settings = config
        .closed_loop
        .settings(x0.len())
        .map_err(|e| e.to_string())?;
    let mut mpc = MpcState::new(model.clone(), gait.clone(), config.mpc.clone(), 0.0, x0.clone())
        .map_err(|e| e.to_string())?;
    let mut plant = ModelPlant::new(
        model.as_ref(),
        &gait,
        0.0,
        settings.duration,
        x0.clone(),
        config.mpc.solver.forward,
    )
    .map_err(|e| e.to_string())?;
    let log = run_closed_loop(&mut mpc, &mut plant, 0.0, x0, &settings).map_err(|e| e.to_string())?;

    log.write_csv(create(&common.out, "closed_loop.csv")?)
        .map_err(|e| e.to_string())?;
    let summary = summarize(&config, &log, &config.closed_loop.disturbances, gait.cycle_duration());
    write_json(&common.out, "summary.json", &summary)?;
    println!(
        "{} {:.2} s, {} MPC steps at {:.1} Hz mean, final tracking error {:.4}",
        if summary.completed { "simulated" } else { "stopped after" },
        summary.simulated_time,
        summary.mpc_steps,
        summary.mean_rate_hz,
        summary.final_tracking_error
    );
    match &summary.error {
        None => Ok(SUCCESS),
        Some(e) => Err(format!("closed loop stopped: {e}")),
    }
}

fn cmd_bench(
    common: &Common,
    partitions: Vec<usize>,
    repeats: Option<usize>,
    warmup: Option<usize>,
) -> CliResult {
    let mut config = load(common)?;
    let setup = config
        .planar_setup()
        .cloned()
        .ok_or("bench needs the planar model")?;
    let mut bench = config.bench.clone();
    if !common.threads.is_empty() {
        bench.threads = common.threads.clone();
    }
    if !partitions.is_empty() {
        bench.partitions = partitions;
    }
    if let Some(r) = repeats {
        bench.repeats = r;
    }
    if let Some(w) = warmup {
        bench.warmup = w;
    }
    if let Some(seed) = common.seed {
        bench.seed = seed;
    }
    if common.sequential_backward {
        config.mpc.solver.parallel_backward = false;
    }
    let gait = config.gait().map_err(|e| e.to_string())?;
    let result = run_bench(&setup, &gait, &config.mpc.solver, &bench).map_err(|e| e.to_string())?;
    result
        .write_csv(create(&common.out, "bench.csv")?)
        .map_err(|e| e.to_string())?;
    write_json(&common.out, "bench.json", &result)?;
    print!("{}", result.table());
    for c in &result.cells {
        println!(
            "partitions {} threads {}: forward {:.2} ms, LQ {:.2} ms, backward {:.2} ms of {:.2} ms",
            c.partitions, c.threads, c.forward_ms, c.lq_approx_ms, c.backward_ms, c.step_ms
        );
    }
    Ok(SUCCESS)
}
