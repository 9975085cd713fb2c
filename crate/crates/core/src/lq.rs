//! Local linear-quadratic model along a nominal trajectory.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::linalg::{
    bracket, fd_gradient, fd_hessian, fd_jacobian, is_finite_matrix, is_finite_vector, lerp,
    lerp_matrix, lerp_vector, min_eigenvalue, stack, symmetrize, Matrix, Vector,
};
use crate::model::{CostExpansion, StageCost, Subsystem, SwitchedProblem, Trajectory};

/// Eigenvalue floor below which the cost Hessian is treated as indefinite.
pub const HESSIAN_EPS: f64 = 1e-9;
/// Smallest eigenvalue enforced on the input Hessian `R`.
pub const INPUT_HESSIAN_FLOOR: f64 = 1e-6;

/// Coefficients of the LQ model at one time node.
///
/// Dynamics `δẋ = A δx + B δu`, constraints `C δx + D δu + e = 0` and
/// `F δx + h = 0`, and the cost expansion
/// `q + q⃗ᵀδx + rᵀδu + δxᵀPδu + ½δxᵀQδx + ½δuᵀRδu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqNode {
    pub t: f64,
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub e: Vector,
    pub f: Matrix,
    pub h: Vector,
    pub q: f64,
    pub q_vec: Vector,
    pub r_vec: Vector,
    pub p: Matrix,
    pub q_mat: Matrix,
    pub r_mat: Matrix,
}

impl LqNode {
    pub fn lerp(&self, other: &LqNode, s: f64) -> LqNode {
        LqNode {
            t: lerp(self.t, other.t, s),
            a: lerp_matrix(&self.a, &other.a, s),
            b: lerp_matrix(&self.b, &other.b, s),
            c: lerp_matrix(&self.c, &other.c, s),
            d: lerp_matrix(&self.d, &other.d, s),
            e: lerp_vector(&self.e, &other.e, s),
            f: lerp_matrix(&self.f, &other.f, s),
            h: lerp_vector(&self.h, &other.h, s),
            q: lerp(self.q, other.q, s),
            q_vec: lerp_vector(&self.q_vec, &other.q_vec, s),
            r_vec: lerp_vector(&self.r_vec, &other.r_vec, s),
            p: lerp_matrix(&self.p, &other.p, s),
            q_mat: lerp_matrix(&self.q_mat, &other.q_mat, s),
            r_mat: lerp_matrix(&self.r_mat, &other.r_mat, s),
        }
    }
}

/// Terminal cost expansion `q_f + q⃗_fᵀδx + ½δxᵀQ_fδx`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalLqNode {
    pub q: f64,
    pub q_vec: Vector,
    pub q_mat: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeLq {
    pub mode: usize,
    pub nodes: Vec<LqNode>,
    pub terminal: TerminalLqNode,
}

impl ModeLq {
    pub fn times(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.t).collect()
    }

    pub fn start_time(&self) -> f64 {
        self.nodes[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.nodes.last().unwrap().t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqApproximation {
    pub modes: Vec<ModeLq>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintLinearization {
    pub c: Matrix,
    pub d: Matrix,
    pub e: Vector,
    pub f: Matrix,
    pub h: Vector,
}

pub fn linearize_dynamics(
    sys: &dyn Subsystem,
    x: &Vector,
    u: &Vector,
    t: f64,
) -> Result<(Matrix, Matrix)> {
    if !is_finite_vector(x) || !is_finite_vector(u) {
        return Err(Error::NonFiniteJacobian { t });
    }
    let (a, b) = match sys.flow_jacobians(x, u, t) {
        Some(j) => j,
        None => fd_dynamics_jacobians(sys, x, u, t),
    };
    if !is_finite_matrix(&a) || !is_finite_matrix(&b) {
        return Err(Error::NonFiniteJacobian { t });
    }
    Ok((a, b))
}

/// Central-difference `(∂f/∂x, ∂f/∂u)`, ignoring any analytic Jacobians.
pub fn fd_dynamics_jacobians(sys: &dyn Subsystem, x: &Vector, u: &Vector, t: f64) -> (Matrix, Matrix) {
    let n = x.len();
    let z = stack(x, u);
    let j = fd_jacobian(|z| sys.flow(&z.rows(0, n).into(), &z.rows(n, u.len()).into(), t), &z);
    (j.columns(0, n).into(), j.columns(n, u.len()).into())
}

/// Central-difference `(∂g1/∂x, ∂g1/∂u)`.
pub fn fd_state_input_constraint_jacobians(
    sys: &dyn Subsystem,
    x: &Vector,
    u: &Vector,
    t: f64,
) -> (Matrix, Matrix) {
    let n = x.len();
    let z = stack(x, u);
    let j = fd_jacobian(
        |z| sys.state_input_constraint(&z.rows(0, n).into(), &z.rows(n, u.len()).into(), t),
        &z,
    );
    (j.columns(0, n).into(), j.columns(n, u.len()).into())
}

pub fn fd_state_constraint_jacobian(sys: &dyn Subsystem, x: &Vector, t: f64) -> Matrix {
    fd_jacobian(|x| sys.state_constraint(x, t), x)
}

pub fn fd_inequality_input_jacobian(sys: &dyn Subsystem, x: &Vector, u: &Vector, t: f64) -> Matrix {
    fd_jacobian(|u| sys.inequality(x, u, t), u)
}

/// Linearizes both constraint families at the nominal point; `e` and `h`
/// are the residuals there.
pub fn linearize_constraints(
    sys: &dyn Subsystem,
    x: &Vector,
    u: &Vector,
    t: f64,
) -> Result<ConstraintLinearization> {
    let e = sys.state_input_constraint(x, u, t);
    let (c, d) = if e.is_empty() {
        (Matrix::zeros(0, x.len()), Matrix::zeros(0, u.len()))
    } else {
        sys.state_input_constraint_jacobians(x, u, t)
            .unwrap_or_else(|| fd_state_input_constraint_jacobians(sys, x, u, t))
    };
    let h = sys.state_constraint(x, t);
    let f = if h.is_empty() {
        Matrix::zeros(0, x.len())
    } else {
        sys.state_constraint_jacobian(x, t)
            .unwrap_or_else(|| fd_state_constraint_jacobian(sys, x, t))
    };
    if e.len() > u.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} state-input constraints exceed input dimension {}",
            e.len(),
            u.len()
        )));
    }
    let finite = [&c, &d, &f].iter().all(|m| is_finite_matrix(m))
        && is_finite_vector(&e)
        && is_finite_vector(&h);
    if !finite {
        return Err(Error::NonFiniteJacobian { t });
    }
    Ok(ConstraintLinearization { c, d, e, f, h })
}

/// Central-difference cost expansion. The Hessian comes from second
/// differences of the cost values.
pub fn fd_cost_expansion(cost: &dyn StageCost, x: &Vector, u: &Vector, t: f64) -> CostExpansion {
    let (n, m) = (x.len(), u.len());
    let z = stack(x, u);
    let l = |z: &Vector| cost.running(&z.rows(0, n).into(), &z.rows(n, m).into(), t);
    let g = fd_gradient(l, &z);
    let hess = fd_hessian(l, &z);
    CostExpansion {
        value: cost.running(x, u, t),
        dx: g.rows(0, n).into(),
        du: g.rows(n, m).into(),
        dxu: hess.view((0, n), (n, m)).into(),
        dxx: hess.view((0, 0), (n, n)).into(),
        duu: hess.view((n, n), (m, m)).into(),
    }
}

/// Expansion of the running cost with symmetrized Hessian blocks.
///
/// When the joint Hessian `[Q P; Pᵀ R]` has an eigenvalue below `−ε`,
/// `Q` is shifted by `(ε − λ_min) I`.
pub fn quadratize_cost(cost: &dyn StageCost, x: &Vector, u: &Vector, t: f64) -> Result<CostExpansion> {
    let mut exp = cost
        .running_expansion(x, u, t)
        .unwrap_or_else(|| fd_cost_expansion(cost, x, u, t));
    let finite = exp.value.is_finite()
        && is_finite_vector(&exp.dx)
        && is_finite_vector(&exp.du)
        && [&exp.dxu, &exp.dxx, &exp.duu]
            .iter()
            .all(|m| is_finite_matrix(m));
    if !finite {
        return Err(Error::NonFiniteDerivative { t });
    }
    symmetrize(&mut exp.dxx);
    symmetrize(&mut exp.duu);
    let (n, m) = (x.len(), u.len());
    let mut joint = Matrix::zeros(n + m, n + m);
    joint.view_mut((0, 0), (n, n)).copy_from(&exp.dxx);
    joint.view_mut((0, n), (n, m)).copy_from(&exp.dxu);
    joint.view_mut((n, 0), (m, n)).copy_from(&exp.dxu.transpose());
    joint.view_mut((n, n), (m, m)).copy_from(&exp.duu);
    let lambda = min_eigenvalue(&joint);
    if lambda < -HESSIAN_EPS {
        for i in 0..n {
            exp.dxx[(i, i)] += HESSIAN_EPS - lambda;
        }
    }
    Ok(exp)
}

pub fn quadratize_terminal(cost: &dyn StageCost, x: &Vector) -> Result<TerminalLqNode> {
    let (value, dx, mut dxx) = match cost.terminal_expansion(x) {
        Some(e) => (e.value, e.dx, e.dxx),
        None => (
            cost.terminal(x),
            fd_gradient(|x| cost.terminal(x), x),
            fd_hessian(|x| cost.terminal(x), x),
        ),
    };
    if !value.is_finite() || !is_finite_vector(&dx) || !is_finite_matrix(&dxx) {
        return Err(Error::NonFiniteDerivative { t: f64::NAN });
    }
    symmetrize(&mut dxx);
    let lambda = min_eigenvalue(&dxx);
    if lambda < -HESSIAN_EPS {
        for i in 0..dxx.nrows() {
            dxx[(i, i)] += HESSIAN_EPS - lambda;
        }
    }
    Ok(TerminalLqNode {
        q: value,
        q_vec: dx,
        q_mat: dxx,
    })
}

/// Raises the smallest eigenvalue of `R` to [`INPUT_HESSIAN_FLOOR`].
pub fn regularize_input_hessian(r: &mut Matrix) {
    let lambda = min_eigenvalue(r);
    if lambda < INPUT_HESSIAN_FLOOR {
        for i in 0..r.nrows() {
            r[(i, i)] += INPUT_HESSIAN_FLOOR - lambda;
        }
    }
}

pub fn lq_node(
    sys: &dyn Subsystem,
    cost: &dyn StageCost,
    x: &Vector,
    u: &Vector,
    t: f64,
) -> Result<LqNode> {
    let (a, b) = linearize_dynamics(sys, x, u, t)?;
    let ConstraintLinearization { c, d, e, f, h } = linearize_constraints(sys, x, u, t)?;
    let mut exp = quadratize_cost(cost, x, u, t)?;
    regularize_input_hessian(&mut exp.duu);
    Ok(LqNode {
        t,
        a,
        b,
        c,
        d,
        e,
        f,
        h,
        q: exp.value,
        q_vec: exp.dx,
        r_vec: exp.du,
        p: exp.dxu,
        q_mat: exp.dxx,
        r_mat: exp.duu,
    })
}

/// Builds the LQ model at every node of `traj`, fanning out over nodes on
/// `pool`. The result does not depend on the pool size.
pub fn build_lq_approximation(
    problem: &SwitchedProblem,
    traj: &Trajectory,
    pool: &ThreadPool,
) -> Result<LqApproximation> {
    if traj.segments().len() != problem.num_modes() {
        return Err(Error::DimensionMismatch(
            "trajectory does not match the schedule".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = traj
        .segments()
        .iter()
        .enumerate()
        .flat_map(|(i, seg)| (0..seg.len()).map(move |k| (i, k)))
        .collect();
    let nodes: Vec<LqNode> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, k)| {
                let seg = traj.segment(i);
                let t = seg.times()[k];
                lq_node(
                    problem.subsystem(i),
                    problem.cost(i),
                    &seg.states.values()[k],
                    &seg.inputs[k],
                    t,
                )
                .map_err(|e| e.at_time(t))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut nodes = nodes.into_iter();
    let modes = traj
        .segments()
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let terminal = quadratize_terminal(problem.cost(i), seg.final_state())
                .map_err(|e| e.at_time(seg.end_time()))?;
            Ok(ModeLq {
                mode: i,
                nodes: nodes.by_ref().take(seg.len()).collect(),
                terminal,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LqApproximation { modes })
}

/// Linear interpolation of the node coefficients at `t`.
pub fn interpolate_lq(mode: &ModeLq, t: f64) -> Result<LqNode> {
    let (t0, t1) = (mode.start_time(), mode.end_time());
    if t < t0 - crate::ode::SPAN_EPS || t > t1 + crate::ode::SPAN_EPS {
        return Err(Error::OutOfSpan {
            t,
            start: t0,
            end: t1,
        });
    }
    if mode.nodes.len() == 1 {
        return Ok(mode.nodes[0].clone());
    }
    let times = mode.times();
    let (k, s) = bracket(&times, t);
    if s == 0.0 {
        return Ok(mode.nodes[k].clone());
    }
    if s == 1.0 {
        return Ok(mode.nodes[k + 1].clone());
    }
    let mut node = mode.nodes[k].lerp(&mode.nodes[k + 1], s);
    node.t = t;
    Ok(node)
}
