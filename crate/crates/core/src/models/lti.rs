//! Linear time-invariant problems with quadratic cost.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{
    CostExpansion, ModeSchedule, StageCost, Subsystem, SwitchedProblem, TerminalExpansion,
};

/// `C x + D u + e = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub c: Matrix,
    pub d: Matrix,
    pub e: Vector,
}

/// `F x + h = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStateConstraint {
    pub f: Matrix,
    pub h: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSubsystem {
    pub a: Matrix,
    pub b: Matrix,
    pub constraint: Option<AffineConstraint>,
    pub state_constraint: Option<AffineStateConstraint>,
}

impl Subsystem for LtiSubsystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn flow(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        &self.a * x + &self.b * u
    }

    fn flow_jacobians(&self, _x: &Vector, _u: &Vector, _t: f64) -> Option<(Matrix, Matrix)> {
        Some((self.a.clone(), self.b.clone()))
    }

    fn state_input_constraint(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        match &self.constraint {
            Some(g) => &g.c * x + &g.d * u + &g.e,
            None => Vector::zeros(0),
        }
    }

    fn state_input_constraint_jacobians(
        &self,
        _x: &Vector,
        _u: &Vector,
        _t: f64,
    ) -> Option<(Matrix, Matrix)> {
        Some(match &self.constraint {
            Some(g) => (g.c.clone(), g.d.clone()),
            None => (Matrix::zeros(0, self.state_dim()), Matrix::zeros(0, self.input_dim())),
        })
    }

    fn state_constraint(&self, x: &Vector, _t: f64) -> Vector {
        match &self.state_constraint {
            Some(g) => &g.f * x + &g.h,
            None => Vector::zeros(0),
        }
    }

    fn state_constraint_jacobian(&self, _x: &Vector, _t: f64) -> Option<Matrix> {
        Some(match &self.state_constraint {
            Some(g) => g.f.clone(),
            None => Matrix::zeros(0, self.state_dim()),
        })
    }
}

/// `½xᵀQx + ½uᵀRu` with terminal `½xᵀQ_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: Matrix,
    pub r: Matrix,
    pub q_final: Matrix,
}

impl StageCost for QuadraticCost {
    fn running(&self, x: &Vector, u: &Vector, _t: f64) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + 0.5 * u.dot(&(&self.r * u))
    }

    fn running_expansion(&self, x: &Vector, u: &Vector, t: f64) -> Option<CostExpansion> {
        Some(CostExpansion {
            value: self.running(x, u, t),
            dx: &self.q * x,
            du: &self.r * u,
            dxu: Matrix::zeros(x.len(), u.len()),
            dxx: self.q.clone(),
            duu: self.r.clone(),
        })
    }

    fn terminal(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.q_final * x))
    }

    fn terminal_expansion(&self, x: &Vector) -> Option<TerminalExpansion> {
        Some(TerminalExpansion {
            value: self.terminal(x),
            dx: &self.q_final * x,
            dxx: self.q_final.clone(),
        })
    }
}

/// Everything needed to build an LTI problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSpec {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub q_final: Matrix,
    pub x0: Vector,
    pub switching_times: Vec<f64>,
    /// Per-mode state-input constraint; shorter lists leave later modes free.
    pub constraints: Vec<Option<AffineConstraint>>,
    pub state_constraints: Vec<Option<AffineStateConstraint>>,
}

impl LtiSpec {
    pub fn new(a: Matrix, b: Matrix, q: Matrix, r: Matrix, q_final: Matrix, x0: Vector) -> Self {
        Self {
            a,
            b,
            q,
            r,
            q_final,
            x0,
            switching_times: vec![0.0, 1.0],
            constraints: Vec::new(),
            state_constraints: Vec::new(),
        }
    }

    pub fn with_switching_times(mut self, times: Vec<f64>) -> Self {
        self.switching_times = times;
        self
    }

    pub fn with_constraint(mut self, mode: usize, g: AffineConstraint) -> Self {
        if self.constraints.len() <= mode {
            self.constraints.resize(mode + 1, None);
        }
        self.constraints[mode] = Some(g);
        self
    }

    pub fn with_state_constraint(mut self, mode: usize, g: AffineStateConstraint) -> Self {
        if self.state_constraints.len() <= mode {
            self.state_constraints.resize(mode + 1, None);
        }
        self.state_constraints[mode] = Some(g);
        self
    }
}

/// Builds a switched LTI problem: identical dynamics in every mode, optional
/// affine constraints per mode, and the terminal weight on the last mode.
pub fn make_lti_problem(spec: &LtiSpec) -> Result<SwitchedProblem> {
    let (n, m) = (spec.a.nrows(), spec.b.ncols());
    let square = |mat: &Matrix, k: usize| mat.nrows() == k && mat.ncols() == k;
    if !square(&spec.a, n)
        || spec.b.nrows() != n
        || !square(&spec.q, n)
        || !square(&spec.r, m)
        || !square(&spec.q_final, n)
        || spec.x0.len() != n
    {
        return Err(Error::DimensionMismatch("LTI problem matrices".into()));
    }
    let modes = spec.switching_times.len().saturating_sub(1);
    for g in spec.constraints.iter().flatten() {
        if g.c.ncols() != n || g.d.ncols() != m || g.c.nrows() != g.d.nrows() || g.e.len() != g.c.nrows() {
            return Err(Error::DimensionMismatch("affine constraint".into()));
        }
    }
    for g in spec.state_constraints.iter().flatten() {
        if g.f.ncols() != n || g.h.len() != g.f.nrows() {
            return Err(Error::DimensionMismatch("affine state constraint".into()));
        }
    }
    let schedule = ModeSchedule::new(spec.switching_times.clone(), (0..modes).collect())?;
    let subsystems: Vec<Arc<dyn Subsystem>> = (0..modes)
        .map(|i| {
            Arc::new(LtiSubsystem {
                a: spec.a.clone(),
                b: spec.b.clone(),
                constraint: spec.constraints.get(i).cloned().flatten(),
                state_constraint: spec.state_constraints.get(i).cloned().flatten(),
            }) as Arc<dyn Subsystem>
        })
        .collect();
    let costs: Vec<Arc<dyn StageCost>> = (0..modes)
        .map(|i| {
            let q_final = if i + 1 == modes {
                spec.q_final.clone()
            } else {
                Matrix::zeros(n, n)
            };
            Arc::new(QuadraticCost {
                q: spec.q.clone(),
                r: spec.r.clone(),
                q_final,
            }) as Arc<dyn StageCost>
        })
        .collect();
    SwitchedProblem::new(schedule, subsystems, costs, spec.x0.clone())
}

/// LTI model for the MPC loop: the same unconstrained system in every
/// mode, regulated to the origin, with the LQR weights equal to the stage
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiMpcModel {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

impl crate::mpc::MpcModel for LtiMpcModel {
    fn build(&self, schedule: &ModeSchedule, _spans: &[(f64, f64)], x0: Vector) -> Result<SwitchedProblem> {
        let n = self.a.nrows();
        let spec = LtiSpec::new(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            Matrix::zeros(n, n),
            x0,
        )
        .with_switching_times(schedule.switching_times().to_vec());
        make_lti_problem(&spec)
    }

    fn terminal_point(&self, _x_final: &Vector, _t_final: f64) -> Result<crate::mpc::TerminalPoint> {
        Ok(crate::mpc::TerminalPoint {
            subsystem: Arc::new(LtiSubsystem {
                a: self.a.clone(),
                b: self.b.clone(),
                constraint: None,
                state_constraint: None,
            }),
            state: Vector::zeros(self.a.nrows()),
            input: Vector::zeros(self.b.ncols()),
        })
    }

    fn lqr_weights(&self) -> (Matrix, Matrix) {
        (self.q.clone(), self.r.clone())
    }

    fn initial_policy(
        &self,
        problem: &SwitchedProblem,
        _ids: &[usize],
    ) -> Result<crate::policy::LinearFeedbackPolicy> {
        Ok(crate::policy::LinearFeedbackPolicy::zero(
            problem.schedule(),
            self.a.nrows(),
            self.b.ncols(),
        ))
    }
}
