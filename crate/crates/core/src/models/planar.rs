//! Planar two-foot legged model with stance/swing contact constraints.
//!
//! State (14): CoM position `(x, z)`, CoM velocity, pitch, pitch rate, foot
//! positions `(x, z)` of foot 0 and foot 1, and four auxiliary states that
//! low-pass filter the commanded foot velocities.
//!
//! Input (8): contact forces `(λx, λz)` of both feet followed by the foot
//! velocity commands `(u_x, u_z)` of both feet.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{
    CostExpansion, ModeSchedule, StageCost, Subsystem, SwitchedProblem, TerminalExpansion,
};
use crate::ode::SPAN_EPS;

pub const STATE_DIM: usize = 14;
pub const INPUT_DIM: usize = 8;

pub const COM_X: usize = 0;
pub const COM_Z: usize = 1;
pub const VEL_X: usize = 2;
pub const VEL_Z: usize = 3;
pub const PITCH: usize = 4;
pub const PITCH_RATE: usize = 5;
pub const FOOT: [usize; 2] = [6, 8];
pub const AUX: usize = 10;

pub const FORCE: [usize; 2] = [0, 2];
pub const FOOT_VEL: [usize; 2] = [4, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanarParams {
    pub mass: f64,
    pub inertia: f64,
    pub gravity: f64,
    pub friction: f64,
    /// Time constant of the foot-velocity filter states.
    pub filter_tau: f64,
    pub swing_apex: f64,
    pub com_height: f64,
    /// Half the nominal distance between the feet.
    pub foot_offset: f64,
}

impl Default for PlanarParams {
    fn default() -> Self {
        Self {
            mass: 10.0,
            inertia: 1.0,
            gravity: 9.81,
            friction: 0.7,
            filter_tau: 0.05,
            swing_apex: 0.1,
            com_height: 0.5,
            foot_offset: 0.15,
        }
    }
}

impl PlanarParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.inertia > 0.0 && self.friction > 0.0 && self.filter_tau > 0.0)
        {
            return Err(Error::InvalidSettings(
                "mass, inertia, friction and filter constant must be positive".into(),
            ));
        }
        if !(self.swing_apex > 0.0) {
            return Err(Error::InvalidSettings("swing apex must be positive".into()));
        }
        Ok(())
    }

    /// Standing state with the CoM above the midpoint of the feet at `x`.
    pub fn standing_state(&self, x: f64) -> Vector {
        let mut s = Vector::zeros(STATE_DIM);
        s[COM_X] = x;
        s[COM_Z] = self.com_height;
        s[FOOT[0]] = x + self.foot_offset;
        s[FOOT[1]] = x - self.foot_offset;
        s
    }
}

/// Vertical swing-foot height profile between lift-off and touch-down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwingProfile {
    pub lift_off: f64,
    pub touch_down: f64,
    pub apex: f64,
}

impl SwingProfile {
    pub fn new(lift_off: f64, touch_down: f64, apex: f64) -> Result<Self> {
        if !(touch_down > lift_off) || !(apex > 0.0) {
            return Err(Error::InvalidSettings(
                "swing profile needs touch_down > lift_off and apex > 0".into(),
            ));
        }
        Ok(Self {
            lift_off,
            touch_down,
            apex,
        })
    }
}

// s²(1 − s)³ peaks at s = 2/5 with value 108/3125.
const SWING_SCALE: f64 = 3125.0 / 108.0;

/// Height and vertical velocity of the swing foot at `t`.
///
/// Uses the quintic `c = apex · (3125/108) · s²(1 − s)³` in the normalized
/// phase `s`, which starts and lands with zero height and zero velocity and
/// peaks at exactly `apex`.
pub fn swing_c(profile: &SwingProfile, t: f64) -> Result<(f64, f64)> {
    let (t0, t1) = (profile.lift_off, profile.touch_down);
    if t < t0 - SPAN_EPS || t > t1 + SPAN_EPS {
        return Err(Error::OutOfSpan {
            t,
            start: t0,
            end: t1,
        });
    }
    let duration = t1 - t0;
    let s = ((t - t0) / duration).clamp(0.0, 1.0);
    let k = profile.apex * SWING_SCALE;
    let w = 1.0 - s;
    let height = k * s * s * w * w * w;
    let dheight = k * (2.0 * s * w * w * w - 3.0 * s * s * w * w) / duration;
    Ok((height, dheight))
}

fn swing_velocity(profile: &SwingProfile, t: f64) -> f64 {
    let clamped = t.clamp(profile.lift_off, profile.touch_down);
    swing_c(profile, clamped).map(|c| c.1).unwrap_or(0.0)
}

/// Which feet are on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactMode {
    FullStance,
    /// Foot 0 in the air, foot 1 on the ground.
    Swing0,
    /// Foot 1 in the air, foot 0 on the ground.
    Swing1,
}

impl ContactMode {
    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(Self::FullStance),
            1 => Ok(Self::Swing0),
            2 => Ok(Self::Swing1),
            _ => Err(Error::InvalidSchedule(format!("unknown contact mode {id}"))),
        }
    }

    pub fn id(self) -> usize {
        match self {
            Self::FullStance => 0,
            Self::Swing0 => 1,
            Self::Swing1 => 2,
        }
    }

    pub fn in_stance(self, foot: usize) -> bool {
        !matches!(
            (self, foot),
            (Self::Swing0, 0) | (Self::Swing1, 1)
        )
    }

    pub fn stance_count(self) -> usize {
        (0..2).filter(|&j| self.in_stance(j)).count()
    }

    /// `4 + number of swing feet`.
    pub fn constraint_count(self) -> usize {
        (0..2).map(|j| if self.in_stance(j) { 2 } else { 3 }).sum()
    }
}

/// One mode of the planar model; the swing profile spans the mode interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarSubsystem {
    pub params: PlanarParams,
    pub contact: ContactMode,
    pub swing: Option<SwingProfile>,
}

impl PlanarSubsystem {
    pub fn new(params: PlanarParams, contact: ContactMode, t0: f64, t1: f64) -> Result<Self> {
        let swing = match contact {
            ContactMode::FullStance => None,
            _ => Some(SwingProfile::new(t0, t1, params.swing_apex)?),
        };
        Ok(Self {
            params,
            contact,
            swing,
        })
    }

    fn swing_velocity(&self, t: f64) -> f64 {
        self.swing.as_ref().map_or(0.0, |p| swing_velocity(p, t))
    }
}

impl Subsystem for PlanarSubsystem {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn input_dim(&self) -> usize {
        INPUT_DIM
    }

    fn flow(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        let p = &self.params;
        let mut dx = Vector::zeros(STATE_DIM);
        dx[COM_X] = x[VEL_X];
        dx[COM_Z] = x[VEL_Z];
        dx[VEL_X] = (u[0] + u[2]) / p.mass;
        dx[VEL_Z] = (u[1] + u[3]) / p.mass - p.gravity;
        dx[PITCH] = x[PITCH_RATE];
        let mut torque = 0.0;
        for j in 0..2 {
            let rx = x[FOOT[j]] - x[COM_X];
            let rz = x[FOOT[j] + 1] - x[COM_Z];
            torque += rx * u[FORCE[j] + 1] - rz * u[FORCE[j]];
        }
        dx[PITCH_RATE] = torque / p.inertia;
        for k in 0..4 {
            dx[FOOT[0] + k] = u[FOOT_VEL[0] + k];
            dx[AUX + k] = (u[FOOT_VEL[0] + k] - x[AUX + k]) / p.filter_tau;
        }
        dx
    }

    fn flow_jacobians(&self, x: &Vector, u: &Vector, _t: f64) -> Option<(Matrix, Matrix)> {
        let p = &self.params;
        let mut a = Matrix::zeros(STATE_DIM, STATE_DIM);
        let mut b = Matrix::zeros(STATE_DIM, INPUT_DIM);
        a[(COM_X, VEL_X)] = 1.0;
        a[(COM_Z, VEL_Z)] = 1.0;
        a[(PITCH, PITCH_RATE)] = 1.0;
        for j in 0..2 {
            let (lx, lz) = (u[FORCE[j]], u[FORCE[j] + 1]);
            let rx = x[FOOT[j]] - x[COM_X];
            let rz = x[FOOT[j] + 1] - x[COM_Z];
            b[(VEL_X, FORCE[j])] = 1.0 / p.mass;
            b[(VEL_Z, FORCE[j] + 1)] = 1.0 / p.mass;
            a[(PITCH_RATE, FOOT[j])] += lz / p.inertia;
            a[(PITCH_RATE, COM_X)] -= lz / p.inertia;
            a[(PITCH_RATE, FOOT[j] + 1)] -= lx / p.inertia;
            a[(PITCH_RATE, COM_Z)] += lx / p.inertia;
            b[(PITCH_RATE, FORCE[j] + 1)] = rx / p.inertia;
            b[(PITCH_RATE, FORCE[j])] = -rz / p.inertia;
        }
        for k in 0..4 {
            b[(FOOT[0] + k, FOOT_VEL[0] + k)] = 1.0;
            a[(AUX + k, AUX + k)] = -1.0 / p.filter_tau;
            b[(AUX + k, FOOT_VEL[0] + k)] = 1.0 / p.filter_tau;
        }
        Some((a, b))
    }

    /// Stance foot: both velocity commands vanish. Swing foot: the vertical
    /// velocity follows the swing profile and the contact force vanishes.
    fn state_input_constraint(&self, _x: &Vector, u: &Vector, t: f64) -> Vector {
        let mut g = Vec::with_capacity(6);
        for j in 0..2 {
            let v = FOOT_VEL[j];
            if self.contact.in_stance(j) {
                g.extend([u[v], u[v + 1]]);
            } else {
                g.extend([
                    u[v + 1] - self.swing_velocity(t),
                    u[FORCE[j]],
                    u[FORCE[j] + 1],
                ]);
            }
        }
        Vector::from_vec(g)
    }

    fn state_input_constraint_jacobians(
        &self,
        _x: &Vector,
        _u: &Vector,
        _t: f64,
    ) -> Option<(Matrix, Matrix)> {
        let rows = self.contact.constraint_count();
        let mut d = Matrix::zeros(rows, INPUT_DIM);
        let mut row = 0;
        for j in 0..2 {
            let v = FOOT_VEL[j];
            let cols: Vec<usize> = if self.contact.in_stance(j) {
                vec![v, v + 1]
            } else {
                vec![v + 1, FORCE[j], FORCE[j] + 1]
            };
            for c in cols {
                d[(row, c)] = 1.0;
                row += 1;
            }
        }
        Some((Matrix::zeros(rows, STATE_DIM), d))
    }

    /// Per stance foot: `λz ≥ 0`, `μλz − λx ≥ 0`, `μλz + λx ≥ 0`.
    fn inequality(&self, _x: &Vector, u: &Vector, _t: f64) -> Vector {
        let mu = self.params.friction;
        let mut h = Vec::with_capacity(6);
        for j in 0..2 {
            if self.contact.in_stance(j) {
                let (lx, lz) = (u[FORCE[j]], u[FORCE[j] + 1]);
                h.extend([lz, mu * lz - lx, mu * lz + lx]);
            }
        }
        Vector::from_vec(h)
    }

    fn inequality_input_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Option<Matrix> {
        let mu = self.params.friction;
        let mut jac = Matrix::zeros(3 * self.contact.stance_count(), INPUT_DIM);
        let mut row = 0;
        for (j, &cx) in FORCE.iter().enumerate() {
            if self.contact.in_stance(j) {
                let cz = cx + 1;
                jac[(row, cz)] = 1.0;
                jac[(row + 1, cz)] = mu;
                jac[(row + 1, cx)] = -1.0;
                jac[(row + 2, cz)] = mu;
                jac[(row + 2, cx)] = 1.0;
                row += 3;
            }
        }
        Some(jac)
    }
}

/// Diagonal weights of the planar cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanarWeights {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl Default for PlanarWeights {
    fn default() -> Self {
        let state = vec![
            50.0, 200.0, 5.0, 5.0, 100.0, 5.0, 5.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        let terminal = state.iter().map(|w| 5.0 * w).collect();
        Self {
            state,
            input: vec![1e-3, 1e-3, 1e-3, 1e-3, 0.1, 0.1, 0.1, 0.1],
            terminal,
        }
    }
}

impl PlanarWeights {
    pub fn validate(&self) -> Result<()> {
        if self.state.len() != STATE_DIM
            || self.terminal.len() != STATE_DIM
            || self.input.len() != INPUT_DIM
        {
            return Err(Error::DimensionMismatch(format!(
                "planar weights need {STATE_DIM} state and {INPUT_DIM} input entries"
            )));
        }
        if self.state.iter().chain(&self.terminal).any(|&w| !(w >= 0.0))
            || self.input.iter().any(|&w| !(w > 0.0))
        {
            return Err(Error::InvalidSettings(
                "state weights must be nonnegative and input weights positive".into(),
            ));
        }
        Ok(())
    }

    pub fn state_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&Vector::from_vec(self.state.clone()))
    }

    pub fn input_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&Vector::from_vec(self.input.clone()))
    }

    pub fn terminal_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&Vector::from_vec(self.terminal.clone()))
    }
}

/// Where the CoM should go.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanarTask {
    /// Stay over `x`.
    Regulation { x: f64 },
    /// Walk from `start` to `goal`, starting at `t_start`, with the CoM
    /// reference advancing at `stride / gait_cycle`.
    Goto {
        start: f64,
        goal: f64,
        t_start: f64,
        stride: f64,
        gait_cycle: f64,
    },
}

impl PlanarTask {
    /// Default go-to recipe: 35 cm per gait cycle.
    pub fn goto(start: f64, goal: f64, t_start: f64, gait_cycle: f64) -> Self {
        Self::Goto {
            start,
            goal,
            t_start,
            stride: 0.35,
            gait_cycle,
        }
    }

    /// CoM x reference at time `t`.
    pub fn com_reference(&self, t: f64) -> f64 {
        match *self {
            Self::Regulation { x } => x,
            Self::Goto {
                start,
                goal,
                t_start,
                stride,
                gait_cycle,
            } => {
                let speed = stride / gait_cycle;
                let travelled = (speed * (t - t_start).max(0.0)).min((goal - start).abs());
                start + travelled * (goal - start).signum()
            }
        }
    }

    /// CoM x velocity reference at time `t`.
    pub fn com_velocity_reference(&self, t: f64) -> f64 {
        match *self {
            Self::Regulation { .. } => 0.0,
            Self::Goto {
                start,
                goal,
                t_start,
                stride,
                gait_cycle,
            } => {
                let speed = stride / gait_cycle;
                let remaining = (goal - start).abs() - speed * (t - t_start).max(0.0);
                if t >= t_start && remaining > 0.0 {
                    speed * (goal - start).signum()
                } else {
                    0.0
                }
            }
        }
    }
}

/// Tracking cost `½(x − x_d)ᵀQ(x − x_d) + ½(u − u_d)ᵀR(u − u_d)` with an
/// optional terminal `½(x − x_d)ᵀQ_f(x − x_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarCost {
    pub params: PlanarParams,
    pub contact: ContactMode,
    pub swing: Option<SwingProfile>,
    pub task: PlanarTask,
    pub q: Matrix,
    pub r: Matrix,
    pub q_final: Option<Matrix>,
    pub t_final: f64,
}

impl PlanarCost {
    pub fn state_reference(&self, t: f64) -> Vector {
        let mut x = self.params.standing_state(self.task.com_reference(t));
        x[VEL_X] = self.task.com_velocity_reference(t);
        x
    }

    /// Gravity split over the stance feet, and the swing profile velocity.
    pub fn input_reference(&self, t: f64) -> Vector {
        equilibrium_input(&self.params, self.contact, self.swing.as_ref(), t)
    }
}

/// Input that holds the CoM up with vertical forces shared equally by the
/// stance feet, with the swing foot following its profile.
pub fn equilibrium_input(
    params: &PlanarParams,
    contact: ContactMode,
    swing: Option<&SwingProfile>,
    t: f64,
) -> Vector {
    let mut u = Vector::zeros(INPUT_DIM);
    let share = params.mass * params.gravity / contact.stance_count().max(1) as f64;
    for j in 0..2 {
        if contact.in_stance(j) {
            u[FORCE[j] + 1] = share;
        } else if let Some(p) = swing {
            u[FOOT_VEL[j] + 1] = swing_velocity(p, t);
        }
    }
    u
}

impl StageCost for PlanarCost {
    fn running(&self, x: &Vector, u: &Vector, t: f64) -> f64 {
        let dx = x - self.state_reference(t);
        let du = u - self.input_reference(t);
        0.5 * dx.dot(&(&self.q * &dx)) + 0.5 * du.dot(&(&self.r * &du))
    }

    fn running_expansion(&self, x: &Vector, u: &Vector, t: f64) -> Option<CostExpansion> {
        let dx = x - self.state_reference(t);
        let du = u - self.input_reference(t);
        let gx = &self.q * &dx;
        let gu = &self.r * &du;
        Some(CostExpansion {
            value: 0.5 * dx.dot(&gx) + 0.5 * du.dot(&gu),
            dx: gx,
            du: gu,
            dxu: Matrix::zeros(STATE_DIM, INPUT_DIM),
            dxx: self.q.clone(),
            duu: self.r.clone(),
        })
    }

    fn terminal(&self, x: &Vector) -> f64 {
        match &self.q_final {
            Some(qf) => {
                let dx = x - self.state_reference(self.t_final);
                0.5 * dx.dot(&(qf * &dx))
            }
            None => 0.0,
        }
    }

    fn terminal_expansion(&self, x: &Vector) -> Option<TerminalExpansion> {
        let qf = self
            .q_final
            .clone()
            .unwrap_or_else(|| Matrix::zeros(STATE_DIM, STATE_DIM));
        let dx = x - self.state_reference(self.t_final);
        let g = &qf * &dx;
        Some(TerminalExpansion {
            value: 0.5 * dx.dot(&g),
            dx: g,
            dxx: qf,
        })
    }
}

/// Everything that defines a planar trot problem except its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanarSetup {
    pub params: PlanarParams,
    pub weights: PlanarWeights,
    pub task: PlanarTask,
}

impl Default for PlanarSetup {
    fn default() -> Self {
        Self {
            params: PlanarParams::default(),
            weights: PlanarWeights::default(),
            task: PlanarTask::Regulation { x: 0.0 },
        }
    }
}

impl PlanarSetup {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.weights.validate()
    }

    /// Builds the problem for `schedule`, whose subsystem ids are contact
    /// modes (see [`ContactMode::from_id`]). Each mode gets its own
    /// subsystem so the swing profile spans exactly that mode; the terminal
    /// weight sits on the last mode only.
    pub fn build(&self, schedule: &ModeSchedule, x0: Vector) -> Result<SwitchedProblem> {
        let spans: Vec<(f64, f64)> = (0..schedule.num_modes()).map(|i| schedule.interval(i)).collect();
        self.build_with_spans(schedule, &spans, x0)
    }

    /// Like [`build`](Self::build), but the swing profile of mode `i` spans
    /// `spans[i]`, which may start before the mode does (a gait phase that
    /// is already under way when the horizon begins).
    pub fn build_with_spans(
        &self,
        schedule: &ModeSchedule,
        spans: &[(f64, f64)],
        x0: Vector,
    ) -> Result<SwitchedProblem> {
        self.validate()?;
        let count = schedule.num_modes();
        if spans.len() != count {
            return Err(Error::DimensionMismatch("one phase span per mode".into()));
        }
        let t_final = schedule.end_time();
        let mut subsystems: Vec<Arc<dyn Subsystem>> = Vec::with_capacity(count);
        let mut costs: Vec<Arc<dyn StageCost>> = Vec::with_capacity(count);
        for (i, &(p0, p1)) in spans.iter().enumerate() {
            let contact = ContactMode::from_id(schedule.subsystem_of(i))?;
            let (t0, t1) = schedule.interval(i);
            if p0 > t0 + SPAN_EPS || (p1 - t1).abs() > SPAN_EPS {
                return Err(Error::InvalidSchedule(format!(
                    "phase [{p0}, {p1}] does not cover mode [{t0}, {t1}]"
                )));
            }
            let sys = PlanarSubsystem::new(self.params.clone(), contact, p0, p1)?;
            costs.push(Arc::new(PlanarCost {
                params: self.params.clone(),
                contact,
                swing: sys.swing,
                task: self.task,
                q: self.weights.state_matrix(),
                r: self.weights.input_matrix(),
                q_final: (i + 1 == count).then(|| self.weights.terminal_matrix()),
                t_final,
            }));
            subsystems.push(Arc::new(sys));
        }
        let per_mode = ModeSchedule::new(schedule.switching_times().to_vec(), (0..count).collect())?;
        SwitchedProblem::new(per_mode, subsystems, costs, x0)
    }
}

/// Planar trot problem from a cyclic gait starting at `t0` and covering at
/// least `horizon` seconds (whole phases only).
pub fn make_planar_trot_problem(
    setup: &PlanarSetup,
    gait: &crate::mpc::GaitPattern,
    t0: f64,
    num_phases: usize,
    x0: Vector,
) -> Result<SwitchedProblem> {
    let schedule = gait.schedule(t0, 0, num_phases)?;
    setup.build(&schedule, x0)
}

/// Gravity-compensating open-loop policy sampled every `dt`, with a small
/// PD correction of the CoM height and pitch through the stance forces.
pub fn planar_initial_policy(
    problem: &SwitchedProblem,
    setup: &PlanarSetup,
    contacts: &[ContactMode],
    dt: f64,
) -> crate::policy::LinearFeedbackPolicy {
    let schedule = problem.schedule();
    let params = &setup.params;
    let segments = (0..schedule.num_modes())
        .map(|i| {
            let (t0, t1) = schedule.interval(i);
            let contact = contacts[i];
            let swing = match contact {
                ContactMode::FullStance => None,
                _ => SwingProfile::new(t0, t1, params.swing_apex).ok(),
            };
            crate::policy::PolicySegment::sampled(t0, t1, dt, |t| {
                let mut u = equilibrium_input(params, contact, swing.as_ref(), t);
                let mut gain = Matrix::zeros(INPUT_DIM, STATE_DIM);
                let reference = setup.params.standing_state(setup.task.com_reference(t));
                let stance = contact.stance_count() as f64;
                for (j, &x) in FORCE.iter().enumerate() {
                    if contact.in_stance(j) {
                        let z = x + 1;
                        gain[(z, COM_Z)] = -params.mass * 100.0 / stance;
                        gain[(z, VEL_Z)] = -params.mass * 20.0 / stance;
                        u[z] -= gain[(z, COM_Z)] * reference[COM_Z];
                        gain[(x, COM_X)] = -params.mass * 10.0 / stance;
                        gain[(x, VEL_X)] = -params.mass * 5.0 / stance;
                        u[x] -= gain[(x, COM_X)] * reference[COM_X];
                    }
                }
                (u, gain)
            })
        })
        .collect();
    crate::policy::LinearFeedbackPolicy::new(segments)
}

/// Diagonal LQR state weights below this are raised to it so that every
/// state is observed by the terminal heuristic.
pub const LQR_WEIGHT_FLOOR: f64 = 1e-2;
/// Foot-velocity weight of the terminal LQR. Foot placement moves the lever
/// arms of the contact forces, and a cheap foot velocity lets the LQR
/// steer the pitch by sliding the feet, which the contact constraints of
/// the real modes forbid.
pub const LQR_FOOT_VELOCITY_WEIGHT: f64 = 10.0;

impl crate::mpc::MpcModel for PlanarSetup {
    fn build(&self, schedule: &ModeSchedule, spans: &[(f64, f64)], x0: Vector) -> Result<SwitchedProblem> {
        self.build_with_spans(schedule, spans, x0)
    }

    /// Standing still at the task reference with both feet down and the
    /// forces holding the body up. The final nominal state only fixes
    /// where the body stands when the task gives no position.
    fn terminal_point(&self, _x_final: &Vector, t_final: f64) -> Result<crate::mpc::TerminalPoint> {
        let sys = PlanarSubsystem::new(self.params.clone(), ContactMode::FullStance, t_final, t_final + 1.0)?;
        Ok(crate::mpc::TerminalPoint {
            subsystem: Arc::new(sys),
            state: self.params.standing_state(self.task.com_reference(t_final)),
            input: equilibrium_input(&self.params, ContactMode::FullStance, None, t_final),
        })
    }

    fn lqr_weights(&self) -> (Matrix, Matrix) {
        let q = Vector::from_iterator(
            STATE_DIM,
            self.weights.state.iter().map(|w| w.max(LQR_WEIGHT_FLOOR)),
        );
        let r = Vector::from_iterator(
            INPUT_DIM,
            self.weights
                .input
                .iter()
                .enumerate()
                .map(|(k, w)| if k >= FOOT_VEL[0] { w.max(LQR_FOOT_VELOCITY_WEIGHT) } else { *w }),
        );
        (Matrix::from_diagonal(&q), Matrix::from_diagonal(&r))
    }

    fn initial_policy(
        &self,
        problem: &SwitchedProblem,
        ids: &[usize],
    ) -> Result<crate::policy::LinearFeedbackPolicy> {
        let contacts = ids.iter().map(|&id| ContactMode::from_id(id)).collect::<Result<Vec<_>>>()?;
        Ok(planar_initial_policy(problem, self, &contacts, 0.02))
    }
}
