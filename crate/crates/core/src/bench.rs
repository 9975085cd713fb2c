//! Partition/thread scaling benchmark on the planar trot problem.
//!
//! Each cell fixes the number of partitions (gait phases in the horizon)
//! and the number of worker threads. The horizon starts mid-trot, at a
//! state taken from a longer solve from standing (the lead-in), so that
//! the start-up transient does not weigh on short horizons. Each cell's
//! problem is first solved to convergence; every repeat then perturbs the initial state, rebases the
//! converged policy on a rollout from it and takes one SLQ iteration, the
//! same work as one MPC step.

use std::fmt::Write as _;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SwitchedProblem;
use crate::models::planar::{ContactMode, PlanarSetup, PITCH, VEL_X, VEL_Z};
use crate::models::planar_initial_policy;
use crate::lqr::design_terminal_lqr;
use crate::mpc::{rebase_policy, GaitPattern, MpcModel};
use crate::linalg::Vector;
use crate::policy::LinearFeedbackPolicy;
use crate::solver::{iterate, make_pool, merit, solve, solve_with_pool, PhaseTimings, SlqIterate, SolverSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub partitions: Vec<usize>,
    pub threads: Vec<usize>,
    pub repeats: usize,
    /// Leading repeats left out of the statistics.
    pub warmup: usize,
    /// Iterations of the lead-in solve and of each cell's warm start.
    pub warm_start_iterations: usize,
    /// Gait phases before the benchmarked horizon starts; 0 starts from
    /// standing.
    pub lead_in_phases: usize,
    /// Scale of the uniform perturbation of the initial velocities and pitch.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            partitions: vec![2, 4],
            threads: vec![1, 2, 4],
            repeats: 300,
            warmup: 10,
            warm_start_iterations: 30,
            lead_in_phases: 4,
            perturbation: 0.02,
            seed: 0,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.partitions.is_empty() || self.threads.is_empty() {
            return Err(Error::InvalidSettings("partition and thread lists must be nonempty".into()));
        }
        if self.partitions.contains(&0) || self.threads.contains(&0) {
            return Err(Error::InvalidSettings("partition and thread counts must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidSettings("at least one measured repeat is needed".into()));
        }
        if !(self.perturbation >= 0.0) {
            return Err(Error::InvalidSettings("perturbation must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Statistics of one (partitions, threads) cell. Times are means in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub partitions: usize,
    pub threads: usize,
    pub parallel_backward: bool,
    pub mean_hz: f64,
    pub std_hz: f64,
    pub forward_ms: f64,
    pub lq_approx_ms: f64,
    pub backward_ms: f64,
    pub step_ms: f64,
    /// Repeats whose line search accepted a step.
    pub accepted: usize,
    pub samples: usize,
}

impl BenchCell {
    pub fn phase_sum_ms(&self) -> f64 {
        self.forward_ms + self.lq_approx_ms + self.backward_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub cells: Vec<BenchCell>,
}

impl BenchResult {
    pub fn cell(&self, partitions: usize, threads: usize) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.partitions == partitions && c.threads == threads)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# fastslq-csv v1")?;
        let mut writer = csv::Writer::from_writer(out);
        writer
            .write_record([
                "partitions",
                "threads",
                "parallel_backward",
                "mean_hz",
                "std_hz",
                "forward_ms",
                "lq_approx_ms",
                "backward_ms",
                "step_ms",
                "accepted",
                "samples",
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        for c in &self.cells {
            writer
                .write_record([
                    c.partitions.to_string(),
                    c.threads.to_string(),
                    c.parallel_backward.to_string(),
                    format!("{:.3}", c.mean_hz),
                    format!("{:.3}", c.std_hz),
                    format!("{:.4}", c.forward_ms),
                    format!("{:.4}", c.lq_approx_ms),
                    format!("{:.4}", c.backward_ms),
                    format!("{:.4}", c.step_ms),
                    c.accepted.to_string(),
                    c.samples.to_string(),
                ])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Rows are partition counts, columns thread counts, entries
    /// `mean ± std` in Hz.
    pub fn table(&self) -> String {
        let mut partitions: Vec<usize> = self.cells.iter().map(|c| c.partitions).collect();
        partitions.dedup();
        partitions.sort_unstable();
        partitions.dedup();
        let mut threads: Vec<usize> = self.cells.iter().map(|c| c.threads).collect();
        threads.sort_unstable();
        threads.dedup();
        let mut out = format!("{:>12}", "partitions");
        for t in &threads {
            let _ = write!(out, " | {:>18}", format!("{t} thread(s)"));
        }
        out.push('\n');
        for p in &partitions {
            let _ = write!(out, "{p:>12}");
            for t in &threads {
                let entry = self
                    .cell(*p, *t)
                    .map_or("-".to_string(), |c| format!("{:.1} ± {:.1} Hz", c.mean_hz, c.std_hz));
                let _ = write!(out, " | {entry:>18}");
            }
            out.push('\n');
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Phase index, time and state where benchmarked horizons start.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchStart {
    pub phase: usize,
    pub t0: f64,
    pub x0: Vector,
}

/// Planar problem over gait phases `first..first + count` starting at
/// `(t0, x0)`, closed by the terminal LQR cost-to-go as in the MPC loop,
/// with its initial policy.
pub fn bench_problem(
    setup: &PlanarSetup,
    gait: &GaitPattern,
    start: &BenchStart,
    count: usize,
) -> Result<(SwitchedProblem, LinearFeedbackPolicy)> {
    let schedule = gait.schedule(start.t0, start.phase, count)?;
    let contacts = schedule
        .subsystem_ids()
        .iter()
        .map(|&id| ContactMode::from_id(id))
        .collect::<Result<Vec<_>>>()?;
    let bare = setup.build(&schedule, start.x0.clone())?;
    let t_f = schedule.end_time();
    let point = setup.terminal_point(bare.x0(), t_f)?;
    let (q, r) = setup.lqr_weights();
    let lqr = design_terminal_lqr(point.subsystem.as_ref(), &point.state, &point.input, t_f, &q, &r)?;
    let problem = bare.with_terminal_value(Some(lqr.value));
    let policy = planar_initial_policy(&problem, setup, &contacts, 0.02);
    Ok((problem, policy))
}

/// Solves `2 · lead_in_phases` phases from standing and returns the state
/// after the first half.
pub fn lead_in(
    setup: &PlanarSetup,
    gait: &GaitPattern,
    solver: &SolverSettings,
    bench: &BenchSettings,
) -> Result<BenchStart> {
    let standing = BenchStart {
        phase: 0,
        t0: 0.0,
        x0: setup.params.standing_state(setup.task.com_reference(0.0)),
    };
    if bench.lead_in_phases == 0 {
        return Ok(standing);
    }
    let (problem, policy) = bench_problem(setup, gait, &standing, 2 * bench.lead_in_phases)?;
    let mut settings = solver.clone();
    settings.max_iterations = bench.warm_start_iterations;
    let outcome = solve(&problem, policy, &settings)?;
    let t0 = problem.schedule().switching_times()[bench.lead_in_phases];
    Ok(BenchStart {
        phase: bench.lead_in_phases,
        t0,
        x0: outcome.trajectory.state_at(t0)?,
    })
}

/// Runs one cell. Cells share nothing, so callers run them one at a time.
pub fn run_cell(
    setup: &PlanarSetup,
    gait: &GaitPattern,
    start: &BenchStart,
    partitions: usize,
    threads: usize,
    solver: &SolverSettings,
    bench: &BenchSettings,
) -> Result<BenchCell> {
    let mut solver = solver.clone();
    solver.num_threads = threads;
    solver.validate()?;
    let pool = make_pool(threads)?;
    let (problem, policy) = bench_problem(setup, gait, start, partitions)?;

    let mut warm_settings = solver.clone();
    warm_settings.max_iterations = bench.warm_start_iterations;
    let warm = solve_with_pool(&problem, policy, &warm_settings, &pool)?;

    let mut rng = StdRng::seed_from_u64(bench.seed ^ ((partitions as u64) << 32) ^ threads as u64);
    let mut rates = Vec::with_capacity(bench.repeats);
    let mut totals = PhaseTimings::default();
    let mut step_time = 0.0;
    let mut accepted = 0;
    for k in 0..bench.warmup + bench.repeats {
        let mut x0 = problem.x0().clone();
        for i in [VEL_X, VEL_Z, PITCH] {
            x0[i] += bench.perturbation * rng.gen_range(-1.0..=1.0);
        }
        let perturbed = problem.clone().with_initial_state(x0)?;

        let clock = Instant::now();
        let (policy, nominal) = rebase_policy(&perturbed, &warm.policy, &solver)?;
        let cost = perturbed.evaluate_cost(&nominal)?;
        let merit = merit(&perturbed, &nominal, cost, &solver)?;
        let rebase = clock.elapsed().as_secs_f64();
        let mut state = SlqIterate {
            policy,
            nominal,
            cost,
            merit,
            value_functions: warm.value_functions.clone(),
            force_sequential: false,
        };
        let record = iterate(&perturbed, &mut state, &solver, &pool)?;
        let elapsed = clock.elapsed().as_secs_f64();

        if k < bench.warmup {
            continue;
        }
        let mut timings = record.timings;
        timings.forward += rebase;
        totals.add(&timings);
        step_time += elapsed;
        rates.push(1.0 / elapsed);
        accepted += usize::from(record.alpha.is_some());
    }
    let n = rates.len() as f64;
    let (mean_hz, std_hz) = mean_std(&rates);
    Ok(BenchCell {
        partitions,
        threads,
        parallel_backward: solver.parallel_backward,
        mean_hz,
        std_hz,
        forward_ms: 1e3 * totals.forward / n,
        lq_approx_ms: 1e3 * totals.lq_approx / n,
        backward_ms: 1e3 * totals.backward / n,
        step_ms: 1e3 * step_time / n,
        accepted,
        samples: rates.len(),
    })
}

/// Every (partitions, threads) cell, strictly one after another.
pub fn run_bench(
    setup: &PlanarSetup,
    gait: &GaitPattern,
    solver: &SolverSettings,
    bench: &BenchSettings,
) -> Result<BenchResult> {
    bench.validate()?;
    let start = lead_in(setup, gait, solver, bench)?;
    let mut cells = Vec::new();
    for &p in &bench.partitions {
        for &t in &bench.threads {
            cells.push(run_cell(setup, gait, &start, p, t, solver, bench)?);
        }
    }
    Ok(BenchResult { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let cell = |p, t, hz| BenchCell {
            partitions: p,
            threads: t,
            parallel_backward: true,
            mean_hz: hz,
            std_hz: 1.0,
            forward_ms: 1.0,
            lq_approx_ms: 1.0,
            backward_ms: 1.0,
            step_ms: 3.0,
            accepted: 1,
            samples: 1,
        };
        let result = BenchResult {
            cells: vec![cell(2, 1, 30.0), cell(2, 4, 31.0), cell(4, 1, 17.0), cell(4, 4, 32.0)],
        };
        let table = result.table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("1 thread(s)") && lines[0].contains("4 thread(s)"));
        assert!(lines[2].trim_start().starts_with('4') && lines[2].contains("32.0 ± 1.0 Hz"));
        let mut buf = Vec::new();
        result.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# fastslq-csv v1\npartitions,threads,"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn settings_validation() {
        assert!(BenchSettings::default().validate().is_ok());
        let empty = BenchSettings {
            threads: vec![],
            ..Default::default()
        };
        assert!(empty.validate().is_err());
    }
}
