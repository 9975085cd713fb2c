//! Real-time-iteration MPC over a cyclic gait.

use std::sync::Arc;
use std::time::Instant;

use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, Matrix, Vector};
use crate::lqr::{design_terminal_lqr, TerminalLqr};
use crate::model::{ModeSchedule, Subsystem, SwitchedProblem, Trajectory};
use crate::ode::{integrate_adaptive_with_stops, IntegratorSettings, SPAN_EPS};
use crate::policy::{project_input, rollout, LinearFeedbackPolicy, PolicySegment, DIVERGENCE_BOUND};
use crate::solver::{
    iterate, make_pool, merit, solve_with_pool, PhaseTimings, SlqIterate, SolverSettings,
    ValueFunctionSet,
};

/// Cyclic sequence of subsystem ids with their phase durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitPattern {
    pub modes: Vec<usize>,
    pub durations: Vec<f64>,
}

impl GaitPattern {
    pub fn new(modes: Vec<usize>, durations: Vec<f64>) -> Result<Self> {
        let gait = Self { modes, durations };
        gait.validate()?;
        Ok(gait)
    }

    /// Every phase lasts `duration`.
    pub fn uniform(modes: Vec<usize>, duration: f64) -> Result<Self> {
        let durations = vec![duration; modes.len()];
        Self::new(modes, durations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.modes.len() != self.durations.len() {
            return Err(Error::InvalidSchedule(
                "gait needs one duration per mode and at least one mode".into(),
            ));
        }
        if self.durations.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidSchedule("gait durations must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn cycle_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Subsystem id and duration of the `k`-th phase (cyclic).
    pub fn phase(&self, k: usize) -> (usize, f64) {
        let i = k % self.modes.len();
        (self.modes[i], self.durations[i])
    }

    /// `count` consecutive phases starting at phase index `first`, at `t0`.
    pub fn schedule(&self, t0: f64, first: usize, count: usize) -> Result<ModeSchedule> {
        let mut times = vec![t0];
        let mut ids = Vec::with_capacity(count);
        for k in first..first + count {
            let (id, d) = self.phase(k);
            times.push(times.last().unwrap() + d);
            ids.push(id);
        }
        ModeSchedule::new(times, ids)
    }
}

/// One gait phase placed on the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Position in the infinite gait sequence.
    pub index: usize,
    pub id: usize,
    pub start: f64,
    pub end: f64,
}

/// Linearization point of the terminal LQR.
pub struct TerminalPoint {
    pub subsystem: Arc<dyn Subsystem>,
    pub state: Vector,
    pub input: Vector,
}

/// What the MPC loop needs to know about a model.
pub trait MpcModel: Send + Sync {
    /// Problem over `schedule` (ids are gait ids). `spans[i]` is the full
    /// gait phase of mode `i`; the first mode may start after its phase did.
    fn build(&self, schedule: &ModeSchedule, spans: &[(f64, f64)], x0: Vector) -> Result<SwitchedProblem>;

    /// Where to linearize the terminal LQR given the final nominal state.
    fn terminal_point(&self, x_final: &Vector, t_final: f64) -> Result<TerminalPoint>;

    /// Default LQR weights `(Q, R)` of the terminal heuristic.
    fn lqr_weights(&self) -> (Matrix, Matrix);

    /// Policy used to start the very first solve.
    fn initial_policy(&self, problem: &SwitchedProblem, ids: &[usize]) -> Result<LinearFeedbackPolicy>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrWeights {
    pub q: Matrix,
    pub r: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcSettings {
    /// Complete modes kept ahead of the current one (n).
    pub modes_ahead: usize,
    /// Extension trigger `t_f − t < t_h`; `None` uses n times the longest
    /// gait phase (plus a hair), which keeps exactly n modes ahead.
    pub horizon_trigger: Option<f64>,
    /// Overrides the model's LQR weights.
    pub lqr_weights: Option<LqrWeights>,
    /// Iteration budget of the solve that produces the first plan.
    pub initial_iterations: usize,
    pub solver: SolverSettings,
}

impl Default for MpcSettings {
    fn default() -> Self {
        let mut solver = SolverSettings {
            parallel_backward: true,
            ..SolverSettings::default()
        };
        solver.forward = solver.forward.with_max_step(0.02);
        Self {
            modes_ahead: 2,
            horizon_trigger: None,
            lqr_weights: None,
            initial_iterations: 20,
            solver,
        }
    }
}

impl MpcSettings {
    pub fn validate(&self, gait: &GaitPattern) -> Result<()> {
        gait.validate()?;
        self.solver.validate()?;
        if self.modes_ahead == 0 {
            return Err(Error::InvalidSettings("at least one mode must stay ahead".into()));
        }
        if let Some(t_h) = self.horizon_trigger {
            if !(t_h > 0.0) {
                return Err(Error::InvalidSettings("horizon trigger must be positive".into()));
            }
        }
        if let Some(w) = &self.lqr_weights {
            if w.q.nrows() != w.q.ncols() || w.r.nrows() != w.r.ncols() {
                return Err(Error::DimensionMismatch("LQR weights must be square".into()));
            }
            if min_eigenvalue(&w.q) < -1e-12 || min_eigenvalue(&w.r) <= 0.0 {
                return Err(Error::InvalidSettings("LQR weights need Q ⪰ 0 and R ≻ 0".into()));
            }
        }
        Ok(())
    }

    pub fn trigger(&self, gait: &GaitPattern) -> f64 {
        self.horizon_trigger.unwrap_or_else(|| {
            let longest = gait.durations.iter().cloned().fold(0.0, f64::max);
            self.modes_ahead as f64 * longest + SPAN_EPS
        })
    }
}

/// Bookkeeping of one MPC step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub plan_id: usize,
    pub t: f64,
    pub horizon: f64,
    /// Modes lying entirely in `[t, t_f]`.
    pub complete_modes: usize,
    pub extended: bool,
    pub accepted: bool,
    pub cost: f64,
    pub merit: f64,
    /// Wall-clock seconds of the whole step.
    pub latency: f64,
    /// Horizon extension and terminal LQR design.
    pub horizon_time: f64,
    /// Solver phases; the rebase rollout counts as forward time.
    pub timings: PhaseTimings,
}

/// Receding-horizon state: the phases in the horizon, one policy segment per
/// phase, the last value functions and the terminal LQR.
pub struct MpcState {
    model: Arc<dyn MpcModel>,
    gait: GaitPattern,
    settings: MpcSettings,
    pool: ThreadPool,
    phases: Vec<Phase>,
    segments: Vec<PolicySegment>,
    value_functions: Option<ValueFunctionSet>,
    terminal: TerminalLqr,
    force_sequential: bool,
    plan: Trajectory,
    problem: SwitchedProblem,
    plan_id: usize,
    pub stats: Vec<StepStats>,
}

fn lerp_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= SPAN_EPS
}

impl MpcState {
    /// Lays out the current phase plus `n` more from `t0` (a phase boundary)
    /// and solves that problem to convergence.
    pub fn new(
        model: Arc<dyn MpcModel>,
        gait: GaitPattern,
        settings: MpcSettings,
        t0: f64,
        x0: Vector,
    ) -> Result<Self> {
        settings.validate(&gait)?;
        let pool = make_pool(settings.solver.num_threads)?;
        let mut phases = Vec::new();
        let mut start = t0;
        for k in 0..=settings.modes_ahead {
            let (id, d) = gait.phase(k);
            phases.push(Phase {
                index: k,
                id,
                start,
                end: start + d,
            });
            start += d;
        }
        let (schedule, spans) = horizon_schedule(&phases, t0)?;
        let bare = model.build(&schedule, &spans, x0.clone())?;
        let ids: Vec<usize> = phases.iter().map(|p| p.id).collect();
        let initial = model.initial_policy(&bare, &ids)?;
        let first = rollout(&bare, &initial, &settings.solver.forward)?;
        let terminal = design_terminal(model.as_ref(), &settings, &first)?;
        let problem = bare.with_terminal_value(Some(terminal.value.clone()));

        let mut solver = settings.solver.clone();
        solver.max_iterations = settings.initial_iterations;
        let outcome = solve_with_pool(&problem, initial, &solver, &pool)?;
        Ok(Self {
            model,
            gait,
            segments: outcome.policy.segments,
            value_functions: outcome.value_functions,
            terminal,
            force_sequential: false,
            plan: outcome.trajectory,
            problem,
            pool,
            phases,
            settings,
            plan_id: 0,
            stats: Vec::new(),
        })
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn final_time(&self) -> f64 {
        self.phases.last().unwrap().end
    }

    pub fn plan(&self) -> &Trajectory {
        &self.plan
    }

    pub fn problem(&self) -> &SwitchedProblem {
        &self.problem
    }

    pub fn policy(&self) -> LinearFeedbackPolicy {
        LinearFeedbackPolicy::new(self.segments.clone())
    }

    pub fn terminal(&self) -> &TerminalLqr {
        &self.terminal
    }

    pub fn value_functions(&self) -> Option<&ValueFunctionSet> {
        self.value_functions.as_ref()
    }

    pub fn plan_id(&self) -> usize {
        self.plan_id
    }

    pub fn settings(&self) -> &MpcSettings {
        &self.settings
    }

    /// Index of the phase active at `t` (half-open phases, clamped).
    fn phase_index(&self, t: f64) -> usize {
        self.phases
            .iter()
            .position(|p| t < p.end - SPAN_EPS)
            .unwrap_or(self.phases.len() - 1)
    }

    /// Unprojected policy input at `(x, t)`.
    pub fn command(&self, x: &Vector, t: f64) -> Vector {
        self.segments[self.phase_index(t)].input(x, t)
    }

    /// Policy node times inside `[t0, t1]`.
    pub fn node_times(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .filter(|&t| t > t0 && t < t1)
            .collect()
    }

    /// Modes lying entirely in `[t, t_f]`.
    pub fn complete_modes(&self, t: f64) -> usize {
        self.phases.iter().filter(|p| p.start >= t - SPAN_EPS).count()
    }

    /// Modes after the one active at `t`.
    fn modes_after(&self, t: f64) -> usize {
        self.phases.len() - 1 - self.phase_index(t)
    }

    /// Drops finished phases and, once `t_f − t < t_h`, appends gait phases
    /// until `n` complete modes follow the active one. Each appended phase
    /// is driven by the current terminal LQR. Returns whether any phase was
    /// appended; the terminal LQR itself is redesigned by the caller once
    /// the new final state is known.
    pub fn extend_horizon(&mut self, t: f64) -> Result<bool> {
        let t_f = self.final_time();
        if t > t_f + SPAN_EPS {
            return Err(Error::OutOfHorizon {
                t,
                start: self.phases[0].start,
                end: t_f,
            });
        }
        let keep_from = self.phase_index(t).min(self.phases.len() - 1);
        self.phases.drain(..keep_from);
        self.segments.drain(..keep_from);
        if t_f - t >= self.settings.trigger(&self.gait) {
            return Ok(false);
        }
        let mut extended = false;
        while self.modes_after(t) < self.settings.modes_ahead {
            let last = *self.phases.last().unwrap();
            let (id, d) = self.gait.phase(last.index + 1);
            let phase = Phase {
                index: last.index + 1,
                id,
                start: last.end,
                end: last.end + d,
            };
            let ff = &self.terminal.input_reference - &self.terminal.gain * &self.terminal.value.reference;
            self.segments.push(PolicySegment::constant(
                phase.start,
                phase.end,
                ff,
                self.terminal.gain.clone(),
            ));
            self.phases.push(phase);
            extended = true;
        }
        Ok(extended)
    }

    /// Problem over `[t0, t_f]` starting from `x0` with the current terminal
    /// heuristic, and the stored policy cut to the same span.
    fn current_problem(&self, t0: f64, x0: &Vector) -> Result<(SwitchedProblem, LinearFeedbackPolicy)> {
        let (schedule, spans) = horizon_schedule(&self.phases, t0)?;
        let problem = self
            .model
            .build(&schedule, &spans, x0.clone())?
            .with_terminal_value(Some(self.terminal.value.clone()));
        let segments = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (a, b) = schedule.interval(i);
                s.restricted(a, b)
            })
            .collect();
        Ok((problem, LinearFeedbackPolicy::new(segments)))
    }

    /// One real-time iteration at the measured `(t0, x0)`: extend the
    /// horizon, rebase the policy on a rollout from `x0`, and take a single
    /// SLQ iteration. A rejected line search keeps the rebased policy.
    pub fn step(&mut self, t0: f64, x0: &Vector) -> Result<StepStats> {
        let clock = Instant::now();
        let extended = self.extend_horizon(t0)?;
        let (mut problem, policy) = self.current_problem(t0, x0)?;
        let mut horizon_time = clock.elapsed().as_secs_f64();

        let rebase_clock = Instant::now();
        let (policy, nominal) = rebase_policy(&problem, &policy, &self.settings.solver)?;
        let mut rebase_time = rebase_clock.elapsed().as_secs_f64();

        if extended {
            let lqr_clock = Instant::now();
            self.terminal = design_terminal(self.model.as_ref(), &self.settings, &nominal)?;
            problem = problem.with_terminal_value(Some(self.terminal.value.clone()));
            horizon_time += lqr_clock.elapsed().as_secs_f64();
        }

        let eval_clock = Instant::now();
        let cost = problem.evaluate_cost(&nominal)?;
        let merit = merit(&problem, &nominal, cost, &self.settings.solver)?;
        rebase_time += eval_clock.elapsed().as_secs_f64();

        let mut iterate_state = SlqIterate {
            policy,
            nominal,
            cost,
            merit,
            value_functions: self.value_functions.take(),
            force_sequential: self.force_sequential,
        };
        let record = iterate(&problem, &mut iterate_state, &self.settings.solver, &self.pool)?;

        self.segments = iterate_state.policy.segments;
        self.value_functions = iterate_state.value_functions;
        self.force_sequential = iterate_state.force_sequential;
        self.plan = iterate_state.nominal;
        self.problem = problem;
        self.plan_id += 1;

        let mut timings = record.timings;
        timings.forward += rebase_time;
        let stats = StepStats {
            plan_id: self.plan_id,
            t: t0,
            horizon: self.final_time() - t0,
            complete_modes: self.complete_modes(t0),
            extended,
            accepted: record.alpha.is_some(),
            cost: iterate_state.cost,
            merit: iterate_state.merit,
            latency: clock.elapsed().as_secs_f64(),
            horizon_time,
            timings,
        };
        self.stats.push(stats.clone());
        Ok(stats)
    }
}

/// Schedule `[t0, phase ends…]` with each mode's full phase span; a first
/// phase that has (numerically) finished at `t0` is skipped.
fn horizon_schedule(phases: &[Phase], t0: f64) -> Result<(ModeSchedule, Vec<(f64, f64)>)> {
    let live: Vec<&Phase> = phases.iter().filter(|p| p.end > t0 + SPAN_EPS).collect();
    if live.is_empty() {
        return Err(Error::OutOfHorizon {
            t: t0,
            start: phases.first().map_or(f64::NAN, |p| p.start),
            end: phases.last().map_or(f64::NAN, |p| p.end),
        });
    }
    let mut times = vec![t0];
    times.extend(live.iter().map(|p| p.end));
    let ids = live.iter().map(|p| p.id).collect();
    let spans = live
        .iter()
        .enumerate()
        .map(|(i, p)| if i == 0 { (p.start.min(t0), p.end) } else { (p.start, p.end) })
        .collect();
    Ok((ModeSchedule::new(times, ids)?, spans))
}

fn design_terminal(model: &dyn MpcModel, settings: &MpcSettings, nominal: &Trajectory) -> Result<TerminalLqr> {
    let point = model.terminal_point(nominal.final_state(), nominal.end_time())?;
    let (q, r) = match &settings.lqr_weights {
        Some(w) => (w.q.clone(), w.r.clone()),
        None => model.lqr_weights(),
    };
    design_terminal_lqr(
        point.subsystem.as_ref(),
        &point.state,
        &point.input,
        nominal.end_time(),
        &q,
        &r,
    )
}

/// Rolls `policy` out from the problem's initial state and moves its
/// feedforward so that the rollout is its own nominal:
/// `u_ff(t) = ū(t) − K(t) x̄(t)` at every rollout node, gains unchanged.
pub fn rebase_policy(
    problem: &SwitchedProblem,
    policy: &LinearFeedbackPolicy,
    settings: &SolverSettings,
) -> Result<(LinearFeedbackPolicy, Trajectory)> {
    let nominal = rollout(problem, policy, &settings.forward)?;
    let segments = nominal
        .segments()
        .iter()
        .zip(&policy.segments)
        .map(|(seg, old)| {
            let mut times = Vec::with_capacity(seg.len());
            let mut ff = Vec::with_capacity(seg.len());
            let mut gains = Vec::with_capacity(seg.len());
            for (t, x, u) in seg.nodes() {
                if times.last().is_some_and(|&last| lerp_time(last, t)) {
                    continue;
                }
                let k = old.gain_at(t);
                ff.push(u - &k * x);
                gains.push(k);
                times.push(t);
            }
            PolicySegment::new(times, ff, gains)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((LinearFeedbackPolicy::new(segments), nominal))
}

/// Instantaneous state change at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    pub delta: Vector,
}

/// The simulated system the MPC controls.
pub trait Plant {
    /// Integrates from `(t0, x0)` to `t1` with the MPC's policy closed
    /// around the plant state, returning the state at `t1`.
    fn advance(&mut self, mpc: &MpcState, x0: &Vector, t0: f64, t1: f64) -> Result<Vector>;

    /// Input the plant applies at `(x, t)`.
    fn applied_input(&self, mpc: &MpcState, x: &Vector, t: f64) -> Result<Vector>;
}

/// Plant that runs the model's own dynamics over the gait, with inputs
/// projected onto the contact inequalities.
pub struct ModelPlant {
    problem: SwitchedProblem,
    settings: IntegratorSettings,
}

impl ModelPlant {
    /// Covers `[t0, t0 + duration]` with gait phases starting at phase 0.
    pub fn new(
        model: &dyn MpcModel,
        gait: &GaitPattern,
        t0: f64,
        duration: f64,
        x0: Vector,
        settings: IntegratorSettings,
    ) -> Result<Self> {
        let count = ((duration / gait.cycle_duration()).ceil() as usize + 2) * gait.len();
        let schedule = gait.schedule(t0, 0, count)?;
        let spans: Vec<(f64, f64)> = (0..count).map(|i| schedule.interval(i)).collect();
        let problem = model.build(&schedule, &spans, x0)?;
        Ok(Self { problem, settings })
    }
}

impl Plant for ModelPlant {
    fn advance(&mut self, mpc: &MpcState, x0: &Vector, t0: f64, t1: f64) -> Result<Vector> {
        let schedule = self.problem.schedule();
        let mut x = x0.clone();
        let mut t = t0;
        while t < t1 - SPAN_EPS {
            let mode = schedule.mode_at(t + SPAN_EPS)?;
            let end = schedule.interval(mode).1.min(t1);
            let sys = self.problem.subsystem(mode);
            let stops = mpc.node_times(t, end);
            let rhs = |s: f64, x: &Vector| sys.flow(x, &project_input(sys, x, &mpc.command(x, s), s), s);
            let guard = |s: f64, x: &Vector| {
                if x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND) {
                    Ok(())
                } else {
                    Err(Error::DivergentRollout { t: s })
                }
            };
            if end - t > SPAN_EPS {
                x = integrate_adaptive_with_stops(rhs, t, end, &x, &stops, &self.settings, guard)
                    .map_err(|e| match e {
                        Error::NonFiniteRhs { t } | Error::StepSizeUnderflow { t, .. } => {
                            Error::DivergentRollout { t }
                        }
                        other => other,
                    })?
                    .last()
                    .clone();
            }
            t = end;
        }
        Ok(x)
    }

    fn applied_input(&self, mpc: &MpcState, x: &Vector, t: f64) -> Result<Vector> {
        let mode = self.problem.schedule().mode_at(t)?;
        let sys = self.problem.subsystem(mode);
        Ok(project_input(sys, x, &mpc.command(x, t), t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopSettings {
    pub duration: f64,
    /// Plant steps and log rows happen at this period.
    pub control_period: f64,
    /// Time between MPC steps; `None` never replans after the first plan.
    pub mpc_period: Option<f64>,
    pub disturbances: Vec<Disturbance>,
}

impl Default for ClosedLoopSettings {
    fn default() -> Self {
        Self {
            duration: 4.0,
            control_period: 0.01,
            mpc_period: Some(0.02),
            disturbances: Vec::new(),
        }
    }
}

impl ClosedLoopSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !(self.control_period > 0.0) {
            return Err(Error::InvalidSettings("duration and control period must be positive".into()));
        }
        if self.mpc_period.is_some_and(|p| !(p > 0.0)) {
            return Err(Error::InvalidSettings("MPC period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub state: Vector,
    pub input: Vector,
    pub plan_id: usize,
    /// Latency of the MPC step that produced the active plan, in seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub rows: Vec<LogRow>,
    pub steps: Vec<StepStats>,
    /// Set when the run stopped early.
    pub error: Option<String>,
}

impl ClosedLoopLog {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }

    /// Writes `# fastslq-csv v1`, a header and one line per row.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# fastslq-csv v1")?;
        let (n, m) = self
            .rows
            .first()
            .map_or((0, 0), |r| (r.state.len(), r.input.len()));
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("plan_id".into());
        header.push("latency_ms".into());
        writer.write_record(&header).map_err(csv_error)?;
        for row in &self.rows {
            let mut record = vec![format!("{}", row.t)];
            record.extend(row.state.iter().map(|v| format!("{v}")));
            record.extend(row.input.iter().map(|v| format!("{v}")));
            record.push(row.plan_id.to_string());
            record.push(format!("{}", row.latency * 1e3));
            writer.write_record(&record).map_err(csv_error)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Alternates plant steps with MPC steps. Disturbances are applied as
/// state jumps at their scheduled times. A failing plant or MPC step ends
/// the run with the log collected so far.
pub fn run_closed_loop(
    mpc: &mut MpcState,
    plant: &mut dyn Plant,
    t0: f64,
    x0: Vector,
    settings: &ClosedLoopSettings,
) -> Result<ClosedLoopLog> {
    settings.validate()?;
    let mut log = ClosedLoopLog {
        rows: Vec::new(),
        steps: Vec::new(),
        error: None,
    };
    let mut pending: Vec<&Disturbance> = settings.disturbances.iter().collect();
    pending.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut pending = pending.into_iter().peekable();
    let t_end = t0 + settings.duration;
    let mut t = t0;
    let mut x = x0;
    let mut next_mpc = settings.mpc_period.map(|p| t0 + p);
    let mut latency = 0.0;
    let outcome: Result<()> = (|| {
        loop {
            while let Some(d) = pending.next_if(|d| d.time <= t + SPAN_EPS) {
                if d.delta.len() != x.len() {
                    return Err(Error::DimensionMismatch("disturbance size".into()));
                }
                x += &d.delta;
            }
            if let Some(tm) = next_mpc {
                if t >= tm - SPAN_EPS {
                    let stats = mpc.step(t, &x)?;
                    latency = stats.latency;
                    log.steps.push(stats);
                    next_mpc = settings.mpc_period.map(|p| tm + p);
                }
            }
            log.rows.push(LogRow {
                t,
                input: plant.applied_input(mpc, &x, t)?,
                state: x.clone(),
                plan_id: mpc.plan_id(),
                latency,
            });
            if t >= t_end - SPAN_EPS {
                return Ok(());
            }
            let mut t_next = (t + settings.control_period).min(t_end);
            if let Some(d) = pending.peek() {
                if d.time > t && d.time < t_next {
                    t_next = d.time;
                }
            }
            x = plant.advance(mpc, &x, t, t_next)?;
            t = t_next;
        }
    })();
    if let Err(e) = outcome {
        log.error = Some(e.to_string());
    }
    Ok(log)
}
