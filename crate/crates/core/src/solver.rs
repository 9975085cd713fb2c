//! SLQ / FastSLQ iteration driver.

use std::time::Instant;

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::lq::{build_lq_approximation, LqApproximation};
use crate::model::{QuadraticValue, SwitchedProblem, Trajectory};
use crate::ode::{IntegratorSettings, SPAN_EPS};
use crate::policy::{rollout, LinearFeedbackPolicy, PolicySegment};
use crate::riccati::{
    final_values, solve_partition_backward, FinalSource, PartitionCoefficients, ValueFunction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Relative cost change below which the iteration stops.
    pub convergence_tol: f64,
    /// Penalty weight on state-only constraints.
    pub rho: f64,
    /// Descending step sizes tried by the line search.
    pub line_search_alphas: Vec<f64>,
    /// Tolerance factor of the expected-cost guard (parallel mode only).
    pub guard_factor: f64,
    /// Weight of `∫‖g1‖²` in the merit used for the decrease test.
    pub constraint_penalty: f64,
    /// A sequential line-search failure counts as convergence when the
    /// smallest step changes the merit by less than this (relative).
    pub stall_tol: f64,
    pub num_threads: usize,
    pub parallel_backward: bool,
    pub forward: IntegratorSettings,
    pub backward: IntegratorSettings,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: 1e-4,
            rho: 100.0,
            line_search_alphas: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            guard_factor: 0.1,
            constraint_penalty: 100.0,
            stall_tol: 1e-6,
            num_threads: 1,
            parallel_backward: false,
            forward: IntegratorSettings::default(),
            backward: IntegratorSettings::default(),
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let alphas = &self.line_search_alphas;
        if alphas.is_empty()
            || alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0))
            || alphas.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::InvalidSettings(
                "line-search steps must be a descending subset of (0, 1]".into(),
            ));
        }
        if !(self.guard_factor > 0.0) {
            return Err(Error::InvalidSettings("guard factor must be positive".into()));
        }
        if !(self.convergence_tol > 0.0)
            || !(self.stall_tol >= 0.0)
            || !(self.rho >= 0.0)
            || !(self.constraint_penalty >= 0.0)
        {
            return Err(Error::InvalidSettings(
                "tolerances, rho and penalty must be nonnegative".into(),
            ));
        }
        if self.num_threads == 0 {
            return Err(Error::InvalidSettings("num_threads must be at least 1".into()));
        }
        self.forward.validate()?;
        self.backward.validate()
    }
}

pub fn make_pool(num_threads: usize) -> Result<ThreadPool> {
    ThreadPoolBuilder::new()
        .num_threads(num_threads.max(1))
        .build()
        .map_err(|e| Error::InvalidSettings(e.to_string()))
}

/// Wall time in seconds spent in each phase of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub forward: f64,
    pub lq_approx: f64,
    pub backward: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.forward + self.lq_approx + self.backward
    }

    pub fn add(&mut self, other: &PhaseTimings) {
        self.forward += other.forward;
        self.lq_approx += other.lq_approx;
        self.backward += other.backward;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    Sequential,
    Parallel,
}

/// Value functions of one backward pass plus the boundary heuristics that
/// were in force, looked up by boundary time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctionSet {
    pub partitions: Vec<ValueFunction>,
    pub boundary_values: Vec<(f64, QuadraticValue)>,
}

impl ValueFunctionSet {
    /// The value function describing the cost-to-go just after time `t`.
    pub fn source_at(&self, t: f64) -> FinalSource<'_> {
        if let Some(vf) = self
            .partitions
            .iter()
            .find(|vf| (vf.start_time() - t).abs() <= SPAN_EPS)
        {
            return FinalSource::Value(vf);
        }
        if let Some(vf) = self
            .partitions
            .iter()
            .find(|vf| vf.start_time() < t - SPAN_EPS && t + SPAN_EPS < vf.end_time())
        {
            return FinalSource::Value(vf);
        }
        if let Some((_, q)) = self
            .boundary_values
            .iter()
            .find(|(tb, _)| (tb - t).abs() <= SPAN_EPS)
        {
            return FinalSource::Quadratic(q);
        }
        FinalSource::None
    }

    /// `V + Vₑ` at `(x, t)` from the partition covering `t`.
    pub fn value_at(&self, x: &Vector, t: f64) -> Result<f64> {
        match self.source_at(t) {
            FinalSource::Value(vf) => {
                let (v, ve) = vf.split_value(x, t)?;
                Ok(v + ve)
            }
            FinalSource::Quadratic(q) => Ok(q.value(x)),
            FinalSource::None => Err(Error::OutOfSpan {
                t,
                start: self.partitions.first().map_or(f64::NAN, |v| v.start_time()),
                end: self.partitions.last().map_or(f64::NAN, |v| v.end_time()),
            }),
        }
    }
}

pub struct BackwardResult {
    pub coefficients: Vec<PartitionCoefficients>,
    pub value_functions: ValueFunctionSet,
    pub mode: BackwardMode,
}

fn solve_partition(
    lq: &LqApproximation,
    nominal: &Trajectory,
    i: usize,
    source: FinalSource<'_>,
    settings: &SolverSettings,
) -> Result<(PartitionCoefficients, ValueFunction)> {
    let seg = nominal.segment(i);
    let coeffs = PartitionCoefficients::new(&lq.modes[i], settings.rho)?;
    let finals = final_values(&lq.modes[i].terminal, source, seg.final_state(), seg.end_time())?;
    let vf = solve_partition_backward(&coeffs, seg, &finals, &settings.backward)?;
    Ok((coeffs, vf))
}

/// Solves the Riccati-like equations of every partition.
///
/// Sequentially, each partition takes its final values from the neighbour
/// solved just before it. In parallel, all partitions start at once from
/// `previous`, re-expanded around the current nominal; when `previous`
/// cannot supply a boundary the pass runs sequentially instead.
pub fn backward_pass(
    problem: &SwitchedProblem,
    lq: &LqApproximation,
    nominal: &Trajectory,
    previous: Option<&ValueFunctionSet>,
    parallel: bool,
    settings: &SolverSettings,
    pool: &ThreadPool,
) -> Result<BackwardResult> {
    let count = lq.modes.len();
    let t_final = problem.schedule().end_time();
    let terminal = problem.terminal_value();
    let boundary_values: Vec<(f64, QuadraticValue)> =
        terminal.map(|q| vec![(t_final, q.clone())]).unwrap_or_default();
    let last_source = terminal.map_or(FinalSource::None, FinalSource::Quadratic);

    let usable_previous = previous.filter(|prev| {
        (0..count.saturating_sub(1)).all(|i| {
            let t = nominal.segment(i).end_time();
            !matches!(prev.source_at(t), FinalSource::None)
        })
    });

    match (parallel && count > 1, usable_previous) {
        (true, Some(prev)) => {
            let solved: Vec<(PartitionCoefficients, ValueFunction)> = pool.install(|| {
                (0..count)
                    .into_par_iter()
                    .map(|i| {
                        let source = if i + 1 == count {
                            last_source
                        } else {
                            prev.source_at(nominal.segment(i).end_time())
                        };
                        solve_partition(lq, nominal, i, source, settings)
                            .map_err(|e| e.in_partition(i))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let (coefficients, partitions) = solved.into_iter().unzip();
            Ok(BackwardResult {
                coefficients,
                value_functions: ValueFunctionSet {
                    partitions,
                    boundary_values,
                },
                mode: BackwardMode::Parallel,
            })
        }
        _ => {
            let mut coefficients = Vec::with_capacity(count);
            let mut partitions: Vec<ValueFunction> = Vec::with_capacity(count);
            for i in (0..count).rev() {
                let source = match partitions.last() {
                    Some(vf) => FinalSource::Value(vf),
                    None => last_source,
                };
                let (c, vf) = solve_partition(lq, nominal, i, source, settings)
                    .map_err(|e| e.in_partition(i))?;
                coefficients.push(c);
                partitions.push(vf);
            }
            coefficients.reverse();
            partitions.reverse();
            Ok(BackwardResult {
                coefficients,
                value_functions: ValueFunctionSet {
                    partitions,
                    boundary_values,
                },
                mode: BackwardMode::Sequential,
            })
        }
    }
}

/// Controller terms `L`, `l`, `lₑ` at one nominal node.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerNode {
    pub t: f64,
    pub gain: Matrix,
    pub l: Vector,
    pub l_e: Vector,
    pub x_nominal: Vector,
    pub u_nominal: Vector,
}

/// The policy update of one backward pass, ready to be scaled by `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerUpdate {
    pub segments: Vec<Vec<ControllerNode>>,
    /// Value-function prediction of the nominal cost at `(x₀, t₀)`.
    pub predicted_value: f64,
}

impl ControllerUpdate {
    /// `u_ff = ū + α l + lₑ − L x̄` with gain `L` at every node.
    pub fn policy(&self, alpha: f64) -> LinearFeedbackPolicy {
        LinearFeedbackPolicy::new(
            self.segments
                .iter()
                .map(|nodes| PolicySegment {
                    times: nodes.iter().map(|n| n.t).collect(),
                    feedforward: nodes
                        .iter()
                        .map(|n| {
                            &n.u_nominal + &n.l * alpha + &n.l_e - &n.gain * &n.x_nominal
                        })
                        .collect(),
                    gains: nodes.iter().map(|n| n.gain.clone()).collect(),
                })
                .collect(),
        )
    }

    /// Largest `‖l‖∞` over all nodes.
    pub fn max_feedforward_step(&self) -> f64 {
        self.segments
            .iter()
            .flatten()
            .map(|n| n.l.amax())
            .fold(0.0, f64::max)
    }
}

/// Computes `L = −(I − D̃)L̃ − C̃`, `l = −(I − D̃)l̃`, `lₑ = −(I − D̃)l̃ₑ − ẽ`
/// at every nominal node.
pub fn update_controller(backward: &BackwardResult, nominal: &Trajectory) -> Result<ControllerUpdate> {
    let vfs = &backward.value_functions.partitions;
    let segments = backward
        .coefficients
        .iter()
        .zip(vfs)
        .zip(nominal.segments())
        .map(|((coeffs, vf), seg)| {
            if coeffs.nodes.len() != seg.len() {
                return Err(Error::DimensionMismatch(
                    "LQ nodes do not match the nominal trajectory".into(),
                ));
            }
            coeffs
                .nodes
                .iter()
                .zip(seg.nodes())
                .map(|(c, (t, x, u))| {
                    let v = vf.sample(t)?;
                    let (l_mat, l_vec, l_e) = c.feedback_terms(&v.s_mat, &v.s_vec, &v.s_e);
                    Ok(ControllerNode {
                        t,
                        gain: -(&c.free * l_mat) - &c.c_tilde,
                        l: -(&c.free * l_vec),
                        l_e: -(&c.free * l_e) - &c.e_tilde,
                        x_nominal: x.clone(),
                        u_nominal: u.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted_value = vfs
        .first()
        .map(|vf| vf.s[0])
        .ok_or_else(|| Error::DimensionMismatch("no partitions".into()))?;
    Ok(ControllerUpdate {
        segments,
        predicted_value,
    })
}

/// Expected cost after a step of size `α` predicted by the value function:
/// `J + (V₀ − J)·α(2 − α)`.
pub fn expected_cost(nominal_cost: f64, predicted_value: f64, alpha: f64) -> f64 {
    nominal_cost + (predicted_value - nominal_cost) * alpha * (2.0 - alpha)
}

/// Cost and merit of one line-search candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub cost: f64,
    pub merit: f64,
}

/// The expected-cost guard: `(J_nominal, V₀, γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostGuard {
    pub nominal_cost: f64,
    pub predicted_value: f64,
    pub factor: f64,
}

/// Picks a step from `alphas` (largest first).
///
/// A candidate is accepted when its merit decreases and, if `guard` is set,
/// its cost is within `γ·max(1, |J_exp|)` of the prediction. Failing that,
/// the smallest step is accepted on decrease alone. `evaluate` returns
/// `None` for candidates whose rollout failed. The returned index refers
/// into `alphas`; the payload of the chosen candidate is handed back.
pub fn line_search<T, E>(
    alphas: &[f64],
    nominal_merit: f64,
    guard: Option<CostGuard>,
    mut evaluate: E,
) -> Result<(usize, CandidateScore, T)>
where
    E: FnMut(f64) -> Option<(CandidateScore, T)>,
{
    let last = alphas.len().checked_sub(1).ok_or(Error::StepRejected)?;
    let mut smallest = None;
    for (k, &alpha) in alphas.iter().enumerate() {
        let Some((score, payload)) = evaluate(alpha) else {
            continue;
        };
        let decreases = score.merit < nominal_merit;
        let within_guard = guard.is_none_or(|g| {
            let exp = expected_cost(g.nominal_cost, g.predicted_value, alpha);
            (score.cost - exp).abs() <= g.factor * exp.abs().max(1.0)
        });
        if decreases && within_guard {
            return Ok((k, score, payload));
        }
        if k == last {
            smallest = Some((k, score, payload));
        }
    }
    match smallest {
        Some((k, score, payload)) if score.merit < nominal_merit => Ok((k, score, payload)),
        _ => Err(Error::StepRejected),
    }
}

/// Cost plus constraint penalties of a trajectory.
pub fn merit(problem: &SwitchedProblem, traj: &Trajectory, cost: f64, settings: &SolverSettings) -> Result<f64> {
    let (ise1, ise2) = problem.constraint_ise(traj)?;
    Ok(cost + settings.constraint_penalty * ise1 + 0.5 * settings.rho * ise2)
}

/// Current iterate of the solver: policy, its rollout and the value
/// functions of the last backward pass.
#[derive(Debug, Clone)]
pub struct SlqIterate {
    pub policy: LinearFeedbackPolicy,
    pub nominal: Trajectory,
    pub cost: f64,
    pub merit: f64,
    pub value_functions: Option<ValueFunctionSet>,
    pub force_sequential: bool,
}

impl SlqIterate {
    pub fn new(problem: &SwitchedProblem, policy: LinearFeedbackPolicy, settings: &SolverSettings) -> Result<(Self, f64)> {
        let start = Instant::now();
        let nominal = rollout(problem, &policy, &settings.forward)?;
        let cost = problem.evaluate_cost(&nominal)?;
        let merit = merit(problem, &nominal, cost, settings)?;
        Ok((
            Self {
                policy,
                nominal,
                cost,
                merit,
                value_functions: None,
                force_sequential: false,
            },
            start.elapsed().as_secs_f64(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub cost: f64,
    pub merit: f64,
    pub alpha: Option<f64>,
    /// Relative merit change of the smallest step when every step failed.
    pub rejected_change: Option<f64>,
    pub predicted_value: f64,
    pub mode: BackwardMode,
    pub timings: PhaseTimings,
}

/// Runs one SLQ iteration: LQ build, backward pass, controller update and
/// line search. On [`Error::StepRejected`] the iterate is left unchanged
/// (apart from stored value functions) and the next iteration is forced
/// to be sequential.
pub fn iterate(
    problem: &SwitchedProblem,
    state: &mut SlqIterate,
    settings: &SolverSettings,
    pool: &ThreadPool,
) -> Result<IterationRecord> {
    let mut timings = PhaseTimings::default();

    let clock = Instant::now();
    let lq = build_lq_approximation(problem, &state.nominal, pool)?;
    timings.lq_approx = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let parallel = settings.parallel_backward && !state.force_sequential;
    let backward = backward_pass(
        problem,
        &lq,
        &state.nominal,
        state.value_functions.as_ref(),
        parallel,
        settings,
        pool,
    )?;
    let update = update_controller(&backward, &state.nominal)?;
    timings.backward = clock.elapsed().as_secs_f64();

    let guard = (backward.mode == BackwardMode::Parallel).then_some(CostGuard {
        nominal_cost: state.cost,
        predicted_value: update.predicted_value,
        factor: settings.guard_factor,
    });
    let clock = Instant::now();
    let smallest = *settings.line_search_alphas.last().unwrap();
    let mut smallest_merit = None;
    let outcome = line_search(&settings.line_search_alphas, state.merit, guard, |alpha| {
        let policy = update.policy(alpha);
        let traj = rollout(problem, &policy, &settings.forward).ok()?;
        let cost = problem.evaluate_cost(&traj).ok()?;
        let merit = merit(problem, &traj, cost, settings).ok()?;
        if alpha == smallest {
            smallest_merit = Some(merit);
        }
        Some((CandidateScore { cost, merit }, (policy, traj)))
    });
    timings.forward = clock.elapsed().as_secs_f64();

    let mode = backward.mode;
    state.value_functions = Some(backward.value_functions);
    match outcome {
        Ok((k, score, (policy, traj))) => {
            state.policy = policy;
            state.nominal = traj;
            state.cost = score.cost;
            state.merit = score.merit;
            state.force_sequential = false;
            Ok(IterationRecord {
                cost: score.cost,
                merit: score.merit,
                alpha: Some(settings.line_search_alphas[k]),
                rejected_change: None,
                predicted_value: update.predicted_value,
                mode,
                timings,
            })
        }
        Err(_) => {
            state.force_sequential = true;
            Ok(IterationRecord {
                cost: state.cost,
                merit: state.merit,
                alpha: None,
                rejected_change: Some(
                    smallest_merit.map_or(f64::INFINITY, |m| relative_change(state.merit, m)),
                ),
                predicted_value: update.predicted_value,
                mode,
                timings,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Cost of the initial rollout followed by the cost after each iteration.
    pub costs: Vec<f64>,
    pub merits: Vec<f64>,
    /// Accepted step per iteration; `None` when the line search rejected.
    pub alphas: Vec<Option<f64>>,
    pub timings: Vec<PhaseTimings>,
    pub modes: Vec<BackwardMode>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_rollout_time: f64,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().unwrap()
    }

    pub fn total_timings(&self) -> PhaseTimings {
        let mut total = PhaseTimings::default();
        for t in &self.timings {
            total.add(t);
        }
        total
    }
}

pub struct SolveOutcome {
    pub policy: LinearFeedbackPolicy,
    pub trajectory: Trajectory,
    pub value_functions: Option<ValueFunctionSet>,
    pub report: SolveReport,
}

fn relative_change(old: f64, new: f64) -> f64 {
    (old - new).abs() / old.abs().max(1e-12)
}

/// Iterates until the relative merit change drops below the tolerance, the
/// line search can make no progress, or the iteration budget runs out.
///
/// The first iteration is always sequential; later ones use the parallel
/// backward pass when `settings.parallel_backward` is set.
pub fn solve(
    problem: &SwitchedProblem,
    initial_policy: LinearFeedbackPolicy,
    settings: &SolverSettings,
) -> Result<SolveOutcome> {
    settings.validate()?;
    let pool = make_pool(settings.num_threads)?;
    solve_with_pool(problem, initial_policy, settings, &pool)
}

pub fn solve_with_pool(
    problem: &SwitchedProblem,
    initial_policy: LinearFeedbackPolicy,
    settings: &SolverSettings,
    pool: &ThreadPool,
) -> Result<SolveOutcome> {
    let (mut state, initial_rollout_time) = SlqIterate::new(problem, initial_policy, settings)?;
    let mut report = SolveReport {
        costs: vec![state.cost],
        merits: vec![state.merit],
        alphas: Vec::new(),
        timings: Vec::new(),
        modes: Vec::new(),
        iterations: 0,
        converged: false,
        initial_rollout_time,
    };
    let mut stalled = false;
    while report.iterations < settings.max_iterations {
        let previous_merit = state.merit;
        let record = iterate(problem, &mut state, settings, pool)?;
        report.iterations += 1;
        report.costs.push(record.cost);
        report.merits.push(record.merit);
        report.alphas.push(record.alpha);
        report.timings.push(record.timings);
        report.modes.push(record.mode);
        match record.alpha {
            Some(_) => {
                stalled = false;
                if relative_change(previous_merit, record.merit) < settings.convergence_tol {
                    report.converged = true;
                    break;
                }
            }
            None if record.mode == BackwardMode::Sequential => {
                // No descent left: converged when even the smallest step
                // changes nothing significant.
                report.converged = record
                    .rejected_change
                    .is_some_and(|c| c < settings.stall_tol.max(settings.convergence_tol));
                break;
            }
            None => {
                if stalled {
                    break;
                }
                stalled = true;
            }
        }
    }
    Ok(SolveOutcome {
        policy: state.policy,
        trajectory: state.nominal,
        value_functions: state.value_functions,
        report,
    })
}
