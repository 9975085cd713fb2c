//! Time-varying affine feedback policies and the forward rollout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{bracket, is_finite_vector, lerp_matrix, lerp_vector, Matrix, Vector};
use crate::lq::fd_inequality_input_jacobian;
use crate::model::{ModeSchedule, Subsystem, SwitchedProblem, Trajectory, TrajectorySegment};
use crate::ode::{integrate_adaptive_with_stops, DenseTrajectory, IntegratorSettings, SPAN_EPS};

/// States with a component above this magnitude abort the rollout.
pub const DIVERGENCE_BOUND: f64 = 1e9;
/// Maximum number of sweeps over the violated inequality constraints.
pub const PROJECTION_PASSES: usize = 5;

/// `u(x, t) = u_ff(t) + L(t) x` over one mode, linear in t between nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySegment {
    pub times: Vec<f64>,
    pub feedforward: Vec<Vector>,
    pub gains: Vec<Matrix>,
}

impl PolicySegment {
    pub fn new(times: Vec<f64>, feedforward: Vec<Vector>, gains: Vec<Matrix>) -> Result<Self> {
        if times.is_empty() || times.len() != feedforward.len() || times.len() != gains.len() {
            return Err(Error::DimensionMismatch("policy node counts differ".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule(
                "policy node times must increase".into(),
            ));
        }
        Ok(Self {
            times,
            feedforward,
            gains,
        })
    }

    pub fn constant(t0: f64, t1: f64, feedforward: Vector, gain: Matrix) -> Self {
        Self {
            times: vec![t0, t1],
            feedforward: vec![feedforward.clone(), feedforward],
            gains: vec![gain.clone(), gain],
        }
    }

    /// Nodes every `dt` (plus both ends) with values from `f(t)`.
    pub fn sampled<F>(t0: f64, t1: f64, dt: f64, mut f: F) -> Self
    where
        F: FnMut(f64) -> (Vector, Matrix),
    {
        let count = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        let times: Vec<f64> = (0..=count)
            .map(|k| if k == count { t1 } else { t0 + (t1 - t0) * k as f64 / count as f64 })
            .collect();
        let (feedforward, gains) = times.iter().map(|&t| f(t)).unzip();
        Self {
            times,
            feedforward,
            gains,
        }
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn feedforward_at(&self, t: f64) -> Vector {
        if self.times.len() == 1 {
            return self.feedforward[0].clone();
        }
        let (k, s) = bracket(&self.times, t);
        lerp_vector(&self.feedforward[k], &self.feedforward[k + 1], s)
    }

    pub fn gain_at(&self, t: f64) -> Matrix {
        if self.times.len() == 1 {
            return self.gains[0].clone();
        }
        let (k, s) = bracket(&self.times, t);
        lerp_matrix(&self.gains[k], &self.gains[k + 1], s)
    }

    /// Evaluates the policy; times outside the node span are clamped.
    pub fn input(&self, x: &Vector, t: f64) -> Vector {
        if self.times.len() == 1 {
            return &self.feedforward[0] + &self.gains[0] * x;
        }
        let (k, s) = bracket(&self.times, t);
        if s == 0.0 {
            return &self.feedforward[k] + &self.gains[k] * x;
        }
        if s == 1.0 {
            return &self.feedforward[k + 1] + &self.gains[k + 1] * x;
        }
        let u0 = &self.feedforward[k] + &self.gains[k] * x;
        let u1 = &self.feedforward[k + 1] + &self.gains[k + 1] * x;
        lerp_vector(&u0, &u1, s)
    }

    /// Keeps only the part on `[t0, t1]`, adding nodes at the cut points.
    pub fn restricted(&self, t0: f64, t1: f64) -> Self {
        let mut times = vec![t0];
        let mut ff = vec![self.feedforward_at(t0)];
        let mut gains = vec![self.gain_at(t0)];
        for (k, &t) in self.times.iter().enumerate() {
            if t > t0 + SPAN_EPS && t < t1 - SPAN_EPS {
                times.push(t);
                ff.push(self.feedforward[k].clone());
                gains.push(self.gains[k].clone());
            }
        }
        if t1 > t0 {
            times.push(t1);
            ff.push(self.feedforward_at(t1));
            gains.push(self.gain_at(t1));
        }
        Self {
            times,
            feedforward: ff,
            gains,
        }
    }
}

/// One [`PolicySegment`] per mode of the schedule it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeedbackPolicy {
    pub segments: Vec<PolicySegment>,
}

impl LinearFeedbackPolicy {
    pub fn new(segments: Vec<PolicySegment>) -> Self {
        Self { segments }
    }

    /// Zero feedforward and zero gain on every mode.
    pub fn zero(schedule: &ModeSchedule, state_dim: usize, input_dim: usize) -> Self {
        Self::constant(schedule, Vector::zeros(input_dim), Matrix::zeros(input_dim, state_dim))
    }

    pub fn constant(schedule: &ModeSchedule, feedforward: Vector, gain: Matrix) -> Self {
        Self {
            segments: (0..schedule.num_modes())
                .map(|i| {
                    let (t0, t1) = schedule.interval(i);
                    PolicySegment::constant(t0, t1, feedforward.clone(), gain.clone())
                })
                .collect(),
        }
    }

    pub fn segment(&self, mode: usize) -> &PolicySegment {
        &self.segments[mode]
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|s| {
            s.feedforward.iter().all(is_finite_vector)
                && s.gains.iter().all(|g| g.iter().all(|v| v.is_finite()))
        })
    }
}

/// Pushes `u` onto the linearized boundary of each violated inequality
/// `h_j(x, u, t) ≥ 0`, sweeping at most [`PROJECTION_PASSES`] times.
///
/// This is best effort: the result is returned even if some constraint is
/// still violated after the last sweep.
pub fn project_input(sys: &dyn Subsystem, x: &Vector, u: &Vector, t: f64) -> Vector {
    let mut u = u.clone();
    for _ in 0..PROJECTION_PASSES {
        let h = sys.inequality(x, &u, t);
        if h.iter().all(|&v| v >= 0.0) {
            break;
        }
        for j in 0..h.len() {
            let h = sys.inequality(x, &u, t);
            if h[j] >= 0.0 {
                continue;
            }
            let jac = sys
                .inequality_input_jacobian(x, &u, t)
                .unwrap_or_else(|| fd_inequality_input_jacobian(sys, x, &u, t));
            let grad = jac.row(j).transpose();
            let norm2 = grad.norm_squared();
            if norm2 > 0.0 && norm2.is_finite() {
                u -= grad * (h[j] / norm2);
            }
        }
    }
    u
}

/// Closed-loop input actually applied by the rollout.
pub fn applied_input(sys: &dyn Subsystem, segment: &PolicySegment, x: &Vector, t: f64) -> Vector {
    project_input(sys, x, &segment.input(x, t), t)
}

/// Forward-integrates the closed loop mode by mode from the problem's
/// initial state.
///
/// The policy's node times are forced integrator nodes, so the recorded
/// inputs at those nodes are exactly the policy's nodal values.
pub fn rollout(
    problem: &SwitchedProblem,
    policy: &LinearFeedbackPolicy,
    settings: &IntegratorSettings,
) -> Result<Trajectory> {
    let schedule = problem.schedule();
    if policy.num_segments() != schedule.num_modes() {
        return Err(Error::DimensionMismatch(format!(
            "policy has {} segments for {} modes",
            policy.num_segments(),
            schedule.num_modes()
        )));
    }
    let mut x = problem.x0().clone();
    let mut segments = Vec::with_capacity(schedule.num_modes());
    for i in 0..schedule.num_modes() {
        let (t0, t1) = schedule.interval(i);
        let sys = problem.subsystem(i);
        let seg = policy.segment(i);
        let rhs = |t: f64, x: &Vector| sys.flow(x, &applied_input(sys, seg, x, t), t);
        let guard = |t: f64, x: &Vector| {
            if x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND) {
                Ok(())
            } else {
                Err(Error::DivergentRollout { t })
            }
        };
        let states = if t1 > t0 {
            integrate_adaptive_with_stops(rhs, t0, t1, &x, &seg.times, settings, guard)
        } else {
            DenseTrajectory::new(vec![t0], vec![x.clone()], None)
        }
        .map_err(|e| match e {
            Error::NonFiniteRhs { t } | Error::StepSizeUnderflow { t, .. } => {
                Error::DivergentRollout { t }
            }
            other => other,
        })?;
        let inputs: Vec<Vector> = states
            .times()
            .iter()
            .zip(states.values())
            .map(|(&t, x)| applied_input(sys, seg, x, t))
            .collect();
        let times = states.times();
        let mid_inputs = (0..times.len().saturating_sub(1))
            .map(|k| {
                let tm = 0.5 * (times[k] + times[k + 1]);
                Ok(applied_input(sys, seg, &states.interpolate(tm)?, tm))
            })
            .collect::<Result<Vec<_>>>()?;
        x = states.last().clone();
        segments.push(TrajectorySegment::new(i, states, inputs)?.with_mid_inputs(mid_inputs)?);
    }
    Trajectory::new(segments)
}
