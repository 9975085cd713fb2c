//! The switched optimal-control problem: mode schedule, subsystem models,
//! per-mode costs, and piecewise trajectories over the schedule.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::ode::{DenseTrajectory, SPAN_EPS};

/// Switching times `t₀ < t₁ < … < t_I` and the subsystem active in each of
/// the `I` modes.
///
/// Mode `i` owns the half-open interval `[tᵢ, tᵢ₊₁)`; the final time `t_I`
/// belongs to the last mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSchedule {
    switching_times: Vec<f64>,
    subsystem_ids: Vec<usize>,
}

impl ModeSchedule {
    pub fn new(switching_times: Vec<f64>, subsystem_ids: Vec<usize>) -> Result<Self> {
        if subsystem_ids.is_empty() || switching_times.len() != subsystem_ids.len() + 1 {
            return Err(Error::InvalidSchedule(format!(
                "{} switching times for {} modes",
                switching_times.len(),
                subsystem_ids.len()
            )));
        }
        if switching_times.iter().any(|t| !t.is_finite())
            || switching_times.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidSchedule(
                "switching times must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            switching_times,
            subsystem_ids,
        })
    }

    /// Uniform phases of `duration` starting at `t0`.
    pub fn uniform(t0: f64, duration: f64, subsystem_ids: Vec<usize>) -> Result<Self> {
        let times = (0..=subsystem_ids.len())
            .map(|k| t0 + duration * k as f64)
            .collect();
        Self::new(times, subsystem_ids)
    }

    pub fn switching_times(&self) -> &[f64] {
        &self.switching_times
    }

    pub fn subsystem_ids(&self) -> &[usize] {
        &self.subsystem_ids
    }

    pub fn num_modes(&self) -> usize {
        self.subsystem_ids.len()
    }

    pub fn start_time(&self) -> f64 {
        self.switching_times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.switching_times.last().unwrap()
    }

    pub fn interval(&self, mode: usize) -> (f64, f64) {
        (self.switching_times[mode], self.switching_times[mode + 1])
    }

    pub fn subsystem_of(&self, mode: usize) -> usize {
        self.subsystem_ids[mode]
    }

    /// Mode active at `t`.
    pub fn mode_at(&self, t: f64) -> Result<usize> {
        let (t0, tf) = (self.start_time(), self.end_time());
        if !(t >= t0 - SPAN_EPS && t <= tf + SPAN_EPS) {
            return Err(Error::OutOfHorizon {
                t,
                start: t0,
                end: tf,
            });
        }
        let k = self.switching_times.partition_point(|&ti| ti <= t);
        Ok(k.clamp(1, self.num_modes()) - 1)
    }
}

/// Second-order expansion of a running cost at a nominal point.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub value: f64,
    pub dx: Vector,
    pub du: Vector,
    /// Mixed block `∂²L/∂x∂u` (n × m).
    pub dxu: Matrix,
    pub dxx: Matrix,
    pub duu: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalExpansion {
    pub value: f64,
    pub dx: Vector,
    pub dxx: Matrix,
}

/// One subsystem `ẋ = f(x, u, t)` with its constraints.
///
/// Equality constraints are `g1(x, u, t) = 0` and `g2(x, t) = 0`;
/// inequality constraints are satisfied when `h(x, u, t) ≥ 0`. Analytic
/// derivatives are optional; `None` selects central finite differences.
pub trait Subsystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn flow(&self, x: &Vector, u: &Vector, t: f64) -> Vector;

    /// `(∂f/∂x, ∂f/∂u)`.
    fn flow_jacobians(&self, _x: &Vector, _u: &Vector, _t: f64) -> Option<(Matrix, Matrix)> {
        None
    }

    fn state_input_constraint(&self, _x: &Vector, _u: &Vector, _t: f64) -> Vector {
        Vector::zeros(0)
    }

    /// `(∂g1/∂x, ∂g1/∂u)`.
    fn state_input_constraint_jacobians(
        &self,
        _x: &Vector,
        _u: &Vector,
        _t: f64,
    ) -> Option<(Matrix, Matrix)> {
        None
    }

    fn state_constraint(&self, _x: &Vector, _t: f64) -> Vector {
        Vector::zeros(0)
    }

    fn state_constraint_jacobian(&self, _x: &Vector, _t: f64) -> Option<Matrix> {
        None
    }

    fn inequality(&self, _x: &Vector, _u: &Vector, _t: f64) -> Vector {
        Vector::zeros(0)
    }

    /// `∂h/∂u`.
    fn inequality_input_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Option<Matrix> {
        None
    }
}

/// Running cost `L(x, u, t)` and terminal cost `Φ(x)` of one mode.
pub trait StageCost: Send + Sync {
    fn running(&self, x: &Vector, u: &Vector, t: f64) -> f64;

    fn running_expansion(&self, _x: &Vector, _u: &Vector, _t: f64) -> Option<CostExpansion> {
        None
    }

    fn terminal(&self, _x: &Vector) -> f64 {
        0.0
    }

    fn terminal_expansion(&self, _x: &Vector) -> Option<TerminalExpansion> {
        None
    }
}

/// `V(x) = offset + ½ (x − x_ref)ᵀ S (x − x_ref)`, used as the terminal
/// cost-to-go beyond the final time.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub hessian: Matrix,
    pub reference: Vector,
    pub offset: f64,
}

impl QuadraticValue {
    pub fn value(&self, x: &Vector) -> f64 {
        let dx = x - &self.reference;
        self.offset + 0.5 * dx.dot(&(&self.hessian * &dx))
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        &self.hessian * (x - &self.reference)
    }
}

/// The full problem: schedule, subsystems indexed by subsystem id, one cost
/// per mode, the initial state, and an optional terminal cost-to-go.
#[derive(Clone)]
pub struct SwitchedProblem {
    schedule: ModeSchedule,
    subsystems: Vec<Arc<dyn Subsystem>>,
    costs: Vec<Arc<dyn StageCost>>,
    x0: Vector,
    state_dim: usize,
    input_dim: usize,
    terminal_value: Option<QuadraticValue>,
}

impl fmt::Debug for SwitchedProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchedProblem")
            .field("schedule", &self.schedule)
            .field("num_subsystems", &self.subsystems.len())
            .field("x0", &self.x0)
            .field("terminal_value", &self.terminal_value.is_some())
            .finish()
    }
}

impl SwitchedProblem {
    pub fn new(
        schedule: ModeSchedule,
        subsystems: Vec<Arc<dyn Subsystem>>,
        costs: Vec<Arc<dyn StageCost>>,
        x0: Vector,
    ) -> Result<Self> {
        let first = subsystems
            .first()
            .ok_or_else(|| Error::DimensionMismatch("no subsystems".into()))?;
        let (n, m) = (first.state_dim(), first.input_dim());
        if subsystems
            .iter()
            .any(|s| s.state_dim() != n || s.input_dim() != m)
        {
            return Err(Error::DimensionMismatch(
                "subsystems disagree on dimensions".into(),
            ));
        }
        if x0.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {} entries, state dimension is {n}",
                x0.len()
            )));
        }
        if costs.len() != schedule.num_modes() {
            return Err(Error::DimensionMismatch(format!(
                "{} costs for {} modes",
                costs.len(),
                schedule.num_modes()
            )));
        }
        if let Some(bad) = schedule
            .subsystem_ids()
            .iter()
            .find(|&&id| id >= subsystems.len())
        {
            return Err(Error::InvalidSchedule(format!("unknown subsystem id {bad}")));
        }
        Ok(Self {
            schedule,
            subsystems,
            costs,
            x0,
            state_dim: n,
            input_dim: m,
            terminal_value: None,
        })
    }

    pub fn with_terminal_value(mut self, value: Option<QuadraticValue>) -> Self {
        self.terminal_value = value;
        self
    }

    pub fn with_initial_state(mut self, x0: Vector) -> Result<Self> {
        if x0.len() != self.state_dim {
            return Err(Error::DimensionMismatch("x0".into()));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn schedule(&self) -> &ModeSchedule {
        &self.schedule
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_modes(&self) -> usize {
        self.schedule.num_modes()
    }

    pub fn subsystems(&self) -> &[Arc<dyn Subsystem>] {
        &self.subsystems
    }

    /// Subsystem active in `mode`.
    pub fn subsystem(&self, mode: usize) -> &dyn Subsystem {
        self.subsystems[self.schedule.subsystem_of(mode)].as_ref()
    }

    pub fn cost(&self, mode: usize) -> &dyn StageCost {
        self.costs[mode].as_ref()
    }

    pub fn costs(&self) -> &[Arc<dyn StageCost>] {
        &self.costs
    }

    pub fn terminal_value(&self) -> Option<&QuadraticValue> {
        self.terminal_value.as_ref()
    }

    /// Residuals of the constraints active at `t`.
    pub fn evaluate_constraints(&self, x: &Vector, u: &Vector, t: f64) -> Result<ConstraintValues> {
        if x.len() != self.state_dim || u.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected x ∈ R^{}, u ∈ R^{}; got {}, {}",
                self.state_dim,
                self.input_dim,
                x.len(),
                u.len()
            )));
        }
        let sys = self.subsystem(self.schedule.mode_at(t)?);
        Ok(ConstraintValues {
            state_input: sys.state_input_constraint(x, u, t),
            state_only: sys.state_constraint(x, t),
            inequality: sys.inequality(x, u, t),
        })
    }

    /// Total cost `Σᵢ Φᵢ(x(tᵢ₊₁)) + ∫ Lᵢ dt` of a trajectory, plus the
/// terminal cost-to-go when one is set (counted in the last mode).
    pub fn evaluate_cost(&self, traj: &Trajectory) -> Result<f64> {
        let per_mode = self.evaluate_cost_per_mode(traj)?;
        let total: f64 = per_mode.iter().sum();
        if !total.is_finite() {
            return Err(Error::NonFiniteCost);
        }
        Ok(total)
    }

    pub fn evaluate_cost_per_mode(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        if traj.segments().len() != self.num_modes() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} segments for {} modes",
                traj.segments().len(),
                self.num_modes()
            )));
        }
        traj.segments()
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let cost = self.cost(i);
                let running = seg.integrate(|x, u, t| cost.running(x, u, t))?;
                let mut c = running + cost.terminal(seg.final_state());
                if i + 1 == self.num_modes() {
                    if let Some(v) = &self.terminal_value {
                        c += v.value(seg.final_state());
                    }
                }
                if c.is_finite() {
                    Ok(c)
                } else {
                    Err(Error::NonFiniteCost)
                }
            })
            .collect()
    }

    /// `(∫‖g1‖² dt, ∫‖g2‖² dt)` along a trajectory.
    pub fn constraint_ise(&self, traj: &Trajectory) -> Result<(f64, f64)> {
        let mut ise = (0.0, 0.0);
        for (i, seg) in traj.segments().iter().enumerate() {
            let sys = self.subsystem(i);
            ise.0 += seg.integrate(|x, u, t| sys.state_input_constraint(x, u, t).norm_squared())?;
            ise.1 += seg.integrate(|x, _, t| sys.state_constraint(x, t).norm_squared())?;
        }
        Ok(ise)
    }

    /// Largest `‖g1‖∞` over all trajectory nodes.
    pub fn max_state_input_violation(&self, traj: &Trajectory) -> f64 {
        traj.segments()
            .iter()
            .enumerate()
            .flat_map(|(i, seg)| {
                let sys = self.subsystem(i);
                seg.nodes()
                    .map(move |(t, x, u)| sys.state_input_constraint(x, u, t).amax())
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    pub state_input: Vector,
    pub state_only: Vector,
    pub inequality: Vector,
}

/// The part of a trajectory inside one mode.
///
/// States carry node derivatives for cubic Hermite interpolation; inputs are
/// interpolated linearly. Neighbouring segments share their boundary time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    pub mode: usize,
    pub states: DenseTrajectory,
    pub inputs: Vec<Vector>,
    /// Inputs at the midpoint of each step, when the producer knows them.
    pub mid_inputs: Option<Vec<Vector>>,
}

impl TrajectorySegment {
    pub fn new(mode: usize, states: DenseTrajectory, inputs: Vec<Vector>) -> Result<Self> {
        if inputs.len() != states.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs for {} nodes",
                inputs.len(),
                states.len()
            )));
        }
        Ok(Self {
            mode,
            states,
            inputs,
            mid_inputs: None,
        })
    }

    /// Attaches the inputs at the step midpoints, used by [`integrate`](Self::integrate).
    pub fn with_mid_inputs(mut self, mid_inputs: Vec<Vector>) -> Result<Self> {
        if mid_inputs.len() != self.len().saturating_sub(1) {
            return Err(Error::DimensionMismatch("one mid-step input per step".into()));
        }
        self.mid_inputs = Some(mid_inputs);
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        self.states.times()
    }

    pub fn start_time(&self) -> f64 {
        self.states.start_time()
    }

    pub fn end_time(&self) -> f64 {
        self.states.end_time()
    }

    pub fn initial_state(&self) -> &Vector {
        self.states.first()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, &Vector, &Vector)> {
        self.states
            .times()
            .iter()
            .zip(self.states.values())
            .zip(&self.inputs)
            .map(|((t, x), u)| (*t, x, u))
    }

    pub fn state_at(&self, t: f64) -> Result<Vector> {
        self.states.interpolate(t)
    }

    pub fn input_at(&self, t: f64) -> Vector {
        let (k, s) = crate::linalg::bracket(self.times(), t);
        if self.inputs.len() == 1 {
            return self.inputs[0].clone();
        }
        crate::linalg::lerp_vector(&self.inputs[k], &self.inputs[k + 1], s)
    }

    /// Composite Simpson quadrature of `g(x, u, t)` over the node grid, with
    /// mid-step states from the Hermite interpolant. Mid-step inputs are the
    /// recorded ones when present, else linearly interpolated.
    pub fn integrate<G>(&self, mut g: G) -> Result<f64>
    where
        G: FnMut(&Vector, &Vector, f64) -> f64,
    {
        let times = self.times();
        let xs = self.states.values();
        let mut total = 0.0;
        let mut g_prev = g(&xs[0], &self.inputs[0], times[0]);
        for k in 0..times.len().saturating_sub(1) {
            let (ta, tb) = (times[k], times[k + 1]);
            let tm = 0.5 * (ta + tb);
            let xm = self.states.interpolate(tm)?;
            let g_mid = match &self.mid_inputs {
                Some(mid) => g(&xm, &mid[k], tm),
                None => g(&xm, &((&self.inputs[k] + &self.inputs[k + 1]) * 0.5), tm),
            };
            let g_next = g(&xs[k + 1], &self.inputs[k + 1], tb);
            total += (tb - ta) / 6.0 * (g_prev + 4.0 * g_mid + g_next);
            g_prev = g_next;
        }
        Ok(total)
    }
}

/// Piecewise trajectory over a mode schedule, one segment per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    segments: Vec<TrajectorySegment>,
}

impl Trajectory {
    pub fn new(segments: Vec<TrajectorySegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::DimensionMismatch("empty trajectory".into()));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[TrajectorySegment] {
        &self.segments
    }

    pub fn segment(&self, mode: usize) -> &TrajectorySegment {
        &self.segments[mode]
    }

    pub fn start_time(&self) -> f64 {
        self.segments[0].start_time()
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().unwrap().end_time()
    }

    pub fn initial_state(&self) -> &Vector {
        self.segments[0].initial_state()
    }

    pub fn final_state(&self) -> &Vector {
        self.segments.last().unwrap().final_state()
    }

    pub fn node_count(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }

    fn segment_index(&self, t: f64) -> usize {
        self.segments
            .iter()
            .position(|s| t < s.end_time())
            .unwrap_or(self.segments.len() - 1)
    }

    pub fn state_at(&self, t: f64) -> Result<Vector> {
        self.segments[self.segment_index(t)].state_at(t)
    }

    pub fn input_at(&self, t: f64) -> Vector {
        self.segments[self.segment_index(t)].input_at(t)
    }

    /// All nodes in time order; boundary times appear once per segment.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, &Vector, &Vector)> {
        self.segments.iter().flat_map(|s| s.nodes())
    }

    /// `# fastslq-csv v1`, then `time, x0.., u0.., mode`, one line per node.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# fastslq-csv v1")?;
        let csv_error = |e: csv::Error| Error::Io(e.to_string());
        let n = self.initial_state().len();
        let m = self.segments[0].inputs.first().map_or(0, |u| u.len());
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("mode".into());
        writer.write_record(&header).map_err(csv_error)?;
        for seg in &self.segments {
            for (t, x, u) in seg.nodes() {
                let mut record = vec![format!("{t}")];
                record.extend(x.iter().map(|v| format!("{v}")));
                record.extend(u.iter().map(|v| format!("{v}")));
                record.push(seg.mode.to_string());
                writer.write_record(&record).map_err(csv_error)?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    struct Zero;
    impl Subsystem for Zero {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn flow(&self, _x: &Vector, _u: &Vector, _t: f64) -> Vector {
            dvector![0.0]
        }
    }

    struct Tracking;
    impl Subsystem for Tracking {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn flow(&self, _x: &Vector, u: &Vector, _t: f64) -> Vector {
            u.clone()
        }
        fn state_input_constraint(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
            u - x
        }
    }

    struct Constant(f64);
    impl StageCost for Constant {
        fn running(&self, _x: &Vector, _u: &Vector, _t: f64) -> f64 {
            self.0
        }
    }

    fn constant_segment(mode: usize, t0: f64, t1: f64, nodes: usize) -> TrajectorySegment {
        let times: Vec<f64> = (0..nodes)
            .map(|k| t0 + (t1 - t0) * k as f64 / (nodes - 1) as f64)
            .collect();
        let xs = vec![dvector![0.0]; nodes];
        let ds = vec![dvector![0.0]; nodes];
        TrajectorySegment::new(
            mode,
            DenseTrajectory::new(times, xs, Some(ds)).unwrap(),
            vec![dvector![0.0]; nodes],
        )
        .unwrap()
    }

    #[test]
    fn mode_at_uses_half_open_intervals() {
        let s = ModeSchedule::new(vec![0.0, 0.4, 0.8], vec![0, 1]).unwrap();
        assert_eq!(s.mode_at(0.0).unwrap(), 0);
        assert_eq!(s.mode_at(0.4).unwrap(), 1);
        assert_eq!(s.mode_at(0.39999).unwrap(), 0);
        assert_eq!(s.mode_at(0.8).unwrap(), 1);
        assert!(matches!(s.mode_at(0.9), Err(Error::OutOfHorizon { .. })));
        assert!(s.mode_at(-0.1).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(ModeSchedule::new(vec![0.0, 0.0], vec![0]).is_err());
        assert!(ModeSchedule::new(vec![0.0, 1.0], vec![0, 1]).is_err());
        assert!(ModeSchedule::new(vec![0.0, 1.0], vec![]).is_err());
    }

    #[test]
    fn constant_running_cost_integrates_to_duration() {
        let schedule = ModeSchedule::new(vec![0.0, 1.0], vec![0]).unwrap();
        let p = SwitchedProblem::new(
            schedule,
            vec![Arc::new(Zero)],
            vec![Arc::new(Constant(1.0))],
            dvector![0.0],
        )
        .unwrap();
        let traj = Trajectory::new(vec![constant_segment(0, 0.0, 1.0, 7)]).unwrap();
        assert!((p.evaluate_cost(&traj).unwrap() - 1.0).abs() < 1e-9);

        let zero = SwitchedProblem::new(
            ModeSchedule::new(vec![0.0, 1.0], vec![0]).unwrap(),
            vec![Arc::new(Zero)],
            vec![Arc::new(Constant(0.0))],
            dvector![0.0],
        )
        .unwrap();
        assert_eq!(zero.evaluate_cost(&traj).unwrap(), 0.0);
    }

    #[test]
    fn constraint_evaluation() {
        let schedule = ModeSchedule::new(vec![0.0, 1.0, 2.0], vec![0, 1]).unwrap();
        let p = SwitchedProblem::new(
            schedule,
            vec![Arc::new(Zero), Arc::new(Tracking)],
            vec![Arc::new(Constant(0.0)), Arc::new(Constant(0.0))],
            dvector![0.0],
        )
        .unwrap();
        let c = p.evaluate_constraints(&dvector![1.0], &dvector![1.0], 0.5).unwrap();
        assert_eq!(c.state_input.len(), 0);
        assert_eq!(c.state_only.len(), 0);
        assert_eq!(c.inequality.len(), 0);
        let c = p.evaluate_constraints(&dvector![2.0], &dvector![2.0], 1.5).unwrap();
        assert_eq!(c.state_input, dvector![0.0]);
        assert!(matches!(
            p.evaluate_constraints(&dvector![1.0, 2.0], &dvector![1.0], 0.5),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn problem_rejects_inconsistent_parts() {
        let schedule = ModeSchedule::new(vec![0.0, 1.0], vec![3]).unwrap();
        assert!(SwitchedProblem::new(
            schedule,
            vec![Arc::new(Zero)],
            vec![Arc::new(Constant(0.0))],
            dvector![0.0]
        )
        .is_err());
    }
}
