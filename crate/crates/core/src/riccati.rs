//! Constrained Riccati-like backward sweep over one partition.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{
    bracket, is_finite_matrix, lerp, lerp_matrix, lerp_vector, symmetrize, Matrix, Vector,
};
use crate::lq::{LqNode, ModeLq, TerminalLqNode};
use crate::model::{QuadraticValue, TrajectorySegment};
use crate::ode::{integrate_adaptive_with_stops, IntegratorSettings, SPAN_EPS};

/// Largest acceptable condition number of `D R⁻¹ Dᵀ`.
pub const MAX_CONSTRAINT_CONDITION: f64 = 1e12;
/// `‖S‖` above which the sweep is declared divergent.
pub const RICCATI_BLOWUP: f64 = 1e12;
const TIKHONOV: f64 = 1e-10;

/// Projected coefficients of one LQ node.
///
/// Besides the projected model this keeps the pieces of `L̃`, `l̃` and `l̃ₑ`
/// that do not depend on the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedLqCoefficients {
    pub t: f64,
    pub d_pinv: Matrix,
    pub a_tilde: Matrix,
    pub c_tilde: Matrix,
    pub d_tilde: Matrix,
    pub e_tilde: Vector,
    pub q_tilde: Matrix,
    pub q_vec_tilde: Vector,
    pub r_tilde: Matrix,
    /// `I − D̃`
    pub free: Matrix,
    pub b: Matrix,
    pub r_mat: Matrix,
    pub q: f64,
    pub r_inv_pt: Matrix,
    pub r_inv_bt: Matrix,
    pub r_inv_r: Vector,
}

impl ProjectedLqCoefficients {
    pub fn lerp(&self, other: &Self, s: f64) -> Self {
        Self {
            t: lerp(self.t, other.t, s),
            d_pinv: lerp_matrix(&self.d_pinv, &other.d_pinv, s),
            a_tilde: lerp_matrix(&self.a_tilde, &other.a_tilde, s),
            c_tilde: lerp_matrix(&self.c_tilde, &other.c_tilde, s),
            d_tilde: lerp_matrix(&self.d_tilde, &other.d_tilde, s),
            e_tilde: lerp_vector(&self.e_tilde, &other.e_tilde, s),
            q_tilde: lerp_matrix(&self.q_tilde, &other.q_tilde, s),
            q_vec_tilde: lerp_vector(&self.q_vec_tilde, &other.q_vec_tilde, s),
            r_tilde: lerp_matrix(&self.r_tilde, &other.r_tilde, s),
            free: lerp_matrix(&self.free, &other.free, s),
            b: lerp_matrix(&self.b, &other.b, s),
            r_mat: lerp_matrix(&self.r_mat, &other.r_mat, s),
            q: lerp(self.q, other.q, s),
            r_inv_pt: lerp_matrix(&self.r_inv_pt, &other.r_inv_pt, s),
            r_inv_bt: lerp_matrix(&self.r_inv_bt, &other.r_inv_bt, s),
            r_inv_r: lerp_vector(&self.r_inv_r, &other.r_inv_r, s),
        }
    }

    /// `(L̃, l̃, l̃ₑ)` for the given value-function coefficients.
    pub fn feedback_terms(&self, s_mat: &Matrix, s_vec: &Vector, s_e: &Vector) -> (Matrix, Vector, Vector) {
        let l_mat = &self.r_inv_pt + &self.r_inv_bt * s_mat;
        let l_vec = &self.r_inv_r + &self.r_inv_bt * s_vec;
        let l_e = &self.r_inv_bt * s_e;
        (l_mat, l_vec, l_e)
    }
}

fn condition_number(m: &Matrix) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverts the symmetric positive matrix `D R⁻¹ Dᵀ`, retrying once with a
/// small Tikhonov shift when it is ill conditioned.
fn invert_constraint_gram(gram: &Matrix) -> Result<Matrix> {
    let cond = condition_number(gram);
    if cond <= MAX_CONSTRAINT_CONDITION {
        if let Some(ch) = Cholesky::new(gram.clone()) {
            return Ok(ch.inverse());
        }
    }
    let c = gram.nrows();
    let shift = TIKHONOV * gram.trace() / c as f64;
    let mut shifted = gram.clone();
    for i in 0..c {
        shifted[(i, i)] += shift;
    }
    let cond_shifted = condition_number(&shifted);
    if !(cond_shifted <= MAX_CONSTRAINT_CONDITION) || !shift.is_finite() || shift <= 0.0 {
        return Err(Error::RankDeficientConstraint { condition: cond });
    }
    Cholesky::new(shifted)
        .map(|ch| ch.inverse())
        .ok_or(Error::RankDeficientConstraint { condition: cond })
}

/// Projects the state-input constraint out of one LQ node and folds the
/// state-only constraint into the cost with penalty `rho`.
pub fn project_constraints(node: &LqNode, rho: f64) -> Result<ProjectedLqCoefficients> {
    let n = node.a.nrows();
    let m = node.b.ncols();
    let r_inv = Cholesky::new(node.r_mat.clone())
        .map(|ch| ch.inverse())
        .ok_or(Error::NonFinite("input Hessian inverse"))?;
    let c1 = node.d.nrows();
    let d_pinv = if c1 == 0 {
        Matrix::zeros(m, 0)
    } else {
        let r_inv_dt = &r_inv * node.d.transpose();
        let gram = &node.d * &r_inv_dt;
        &r_inv_dt * invert_constraint_gram(&gram)?
    };
    let c_tilde = &d_pinv * &node.c;
    let d_tilde = &d_pinv * &node.d;
    let e_tilde = &d_pinv * &node.e;
    let a_tilde = &node.a - &node.b * &c_tilde;
    let free = Matrix::identity(m, m) - &d_tilde;

    let p_ct = &node.p * &c_tilde;
    let mut q_tilde = &node.q_mat + c_tilde.transpose() * &node.r_mat * &c_tilde
        - &p_ct
        - p_ct.transpose();
    let mut q_vec_tilde = &node.q_vec - c_tilde.transpose() * &node.r_vec;
    if node.f.nrows() > 0 {
        q_tilde += rho * node.f.transpose() * &node.f;
        q_vec_tilde += rho * node.f.transpose() * &node.h;
    }
    symmetrize(&mut q_tilde);
    let mut r_tilde = free.transpose() * &node.r_mat * &free;
    symmetrize(&mut r_tilde);

    let out = ProjectedLqCoefficients {
        t: node.t,
        r_inv_pt: &r_inv * node.p.transpose(),
        r_inv_bt: &r_inv * node.b.transpose(),
        r_inv_r: &r_inv * &node.r_vec,
        d_pinv,
        a_tilde,
        c_tilde,
        d_tilde,
        e_tilde,
        q_tilde,
        q_vec_tilde,
        r_tilde,
        free,
        b: node.b.clone(),
        r_mat: node.r_mat.clone(),
        q: node.q,
    };
    debug_assert_eq!(out.a_tilde.nrows(), n);
    if !is_finite_matrix(&out.d_pinv) || !is_finite_matrix(&out.q_tilde) {
        return Err(Error::NonFinite("projected coefficients"));
    }
    Ok(out)
}

/// Time derivatives `(Ṡ, ṡ⃗, ṡ⃗ₑ, ṡ)` of the value-function coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiDerivatives {
    pub s_mat: Matrix,
    pub s_vec: Vector,
    pub s_e: Vector,
    pub s: f64,
}

/// Right-hand side of the constrained Riccati-like equations.
///
/// The scalar equation carries the factor ½ on `l̃ᵀR̃l̃` that the
/// quadratic-in-`δu` minimization produces.
pub fn riccati_rhs(
    coeffs: &ProjectedLqCoefficients,
    s_mat: &Matrix,
    s_vec: &Vector,
    s_e: &Vector,
) -> Result<RiccatiDerivatives> {
    let (l_mat, l_vec, l_e) = coeffs.feedback_terms(s_mat, s_vec, s_e);
    let at = coeffs.a_tilde.transpose();
    let lt_rt = l_mat.transpose() * &coeffs.r_tilde;
    let mut neg_ds = &at * s_mat + s_mat.transpose() * &coeffs.a_tilde - &lt_rt * &l_mat
        + &coeffs.q_tilde;
    symmetrize(&mut neg_ds);
    let neg_dsv = &at * s_vec - &lt_rt * &l_vec + &coeffs.q_vec_tilde;
    let neg_dse = &at * s_e - &lt_rt * &l_e
        + (&coeffs.c_tilde - &l_mat).transpose() * (&coeffs.r_mat * &coeffs.e_tilde);
    let neg_ds_scalar = coeffs.q - 0.5 * l_vec.dot(&(&coeffs.r_tilde * &l_vec));
    let d = RiccatiDerivatives {
        s_mat: -neg_ds,
        s_vec: -neg_dsv,
        s_e: -neg_dse,
        s: -neg_ds_scalar,
    };
    let finite = is_finite_matrix(&d.s_mat)
        && d.s_vec.iter().chain(d.s_e.iter()).all(|v| v.is_finite())
        && d.s.is_finite();
    if finite {
        Ok(d)
    } else {
        Err(Error::NonFinite("Riccati right-hand side"))
    }
}

/// Final values of the value-function coefficients at a partition's end.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiFinalValues {
    pub s_mat: Matrix,
    pub s_vec: Vector,
    pub s_e: Vector,
    pub s: f64,
}

impl RiccatiFinalValues {
    pub fn zeros(n: usize) -> Self {
        Self {
            s_mat: Matrix::zeros(n, n),
            s_vec: Vector::zeros(n),
            s_e: Vector::zeros(n),
            s: 0.0,
        }
    }
}

/// Quadratic value-function model over one partition, stored at the
/// backward integrator's nodes (ascending in time).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub partition: usize,
    pub times: Vec<f64>,
    pub s_mat: Vec<Matrix>,
    pub s_vec: Vec<Vector>,
    pub s_e: Vec<Vector>,
    pub s: Vec<f64>,
    /// Nominal state `x̄(t)` the expansion is taken around.
    pub nominal: Vec<Vector>,
}

/// A value function evaluated at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    pub s_mat: Matrix,
    pub s_vec: Vector,
    pub s_e: Vector,
    pub s: f64,
    pub nominal: Vector,
}

/// `(V + Vₑ, ∇, ∇²)` at a state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEvaluation {
    pub value: f64,
    pub gradient: Vector,
    pub hessian: Matrix,
}

impl ValueFunction {
    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_time() - SPAN_EPS && t <= self.end_time() + SPAN_EPS
    }

    /// Linear interpolation of the stored coefficients; exact at nodes.
    pub fn sample(&self, t: f64) -> Result<ValueSample> {
        if !self.contains(t) {
            return Err(Error::OutOfSpan {
                t,
                start: self.start_time(),
                end: self.end_time(),
            });
        }
        let (k, s) = bracket(&self.times, t);
        let j = (k + 1).min(self.times.len() - 1);
        if s == 0.0 || j == k {
            return Ok(self.node(k));
        }
        if s == 1.0 {
            return Ok(self.node(j));
        }
        Ok(ValueSample {
            s_mat: lerp_matrix(&self.s_mat[k], &self.s_mat[j], s),
            s_vec: lerp_vector(&self.s_vec[k], &self.s_vec[j], s),
            s_e: lerp_vector(&self.s_e[k], &self.s_e[j], s),
            s: lerp(self.s[k], self.s[j], s),
            nominal: lerp_vector(&self.nominal[k], &self.nominal[j], s),
        })
    }

    fn node(&self, k: usize) -> ValueSample {
        ValueSample {
            s_mat: self.s_mat[k].clone(),
            s_vec: self.s_vec[k].clone(),
            s_e: self.s_e[k].clone(),
            s: self.s[k],
            nominal: self.nominal[k].clone(),
        }
    }

    /// Returns `(V, Vₑ)` at `x` separately.
    pub fn split_value(&self, x: &Vector, t: f64) -> Result<(f64, f64)> {
        let v = self.sample(t)?;
        let dx = x - &v.nominal;
        Ok((
            v.s + dx.dot(&v.s_vec) + 0.5 * dx.dot(&(&v.s_mat * &dx)),
            dx.dot(&v.s_e),
        ))
    }
}

/// `V(x,t) + Vₑ(x,t)` with its gradient and Hessian.
pub fn evaluate_value_function(vf: &ValueFunction, x: &Vector, t: f64) -> Result<ValueEvaluation> {
    let v = vf.sample(t)?;
    let dx = x - &v.nominal;
    let sdx = &v.s_mat * &dx;
    Ok(ValueEvaluation {
        value: v.s + dx.dot(&v.s_vec) + 0.5 * dx.dot(&sdx) + dx.dot(&v.s_e),
        gradient: &v.s_vec + sdx + &v.s_e,
        hessian: v.s_mat,
    })
}

/// Where a partition's final values come from.
#[derive(Debug, Clone, Copy)]
pub enum FinalSource<'a> {
    /// A value function (previous iteration, or the neighbour just solved).
    Value(&'a ValueFunction),
    /// A quadratic cost-to-go such as the terminal LQR heuristic.
    Quadratic(&'a QuadraticValue),
    None,
}

/// Final values at `t_next` for nominal state `x_next`.
///
/// A value function is re-expanded around `x_next`: the gradient is
/// corrected to first order by `S δx`, the Hessian is reused unchanged, and
/// the constraint part keeps its slope.
pub fn final_values(
    terminal: &TerminalLqNode,
    next: FinalSource<'_>,
    x_next: &Vector,
    t_next: f64,
) -> Result<RiccatiFinalValues> {
    let mut out = RiccatiFinalValues {
        s_mat: terminal.q_mat.clone(),
        s_vec: terminal.q_vec.clone(),
        s_e: Vector::zeros(x_next.len()),
        s: terminal.q,
    };
    match next {
        FinalSource::Value(vf) => {
            let v = vf.sample(t_next)?;
            let dx = x_next - &v.nominal;
            let sdx = &v.s_mat * &dx;
            out.s_mat += &v.s_mat;
            out.s_vec += &v.s_vec + &sdx;
            out.s_e = v.s_e.clone();
            out.s += v.s + dx.dot(&v.s_vec) + 0.5 * dx.dot(&sdx) + dx.dot(&v.s_e);
        }
        FinalSource::Quadratic(q) => {
            out.s_mat += &q.hessian;
            out.s_vec += q.gradient(x_next);
            out.s += q.value(x_next);
        }
        FinalSource::None => {}
    }
    symmetrize(&mut out.s_mat);
    Ok(out)
}

/// Projected coefficients at every LQ node of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCoefficients {
    pub mode: usize,
    pub nodes: Vec<ProjectedLqCoefficients>,
}

impl PartitionCoefficients {
    pub fn new(lq: &ModeLq, rho: f64) -> Result<Self> {
        let nodes = lq
            .nodes
            .iter()
            .map(|node| project_constraints(node, rho).map_err(|e| e.at_time(node.t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: lq.mode,
            nodes,
        })
    }

    pub fn times(&self) -> Vec<f64> {
        self.nodes.iter().map(|c| c.t).collect()
    }

    pub fn at(&self, t: f64) -> ProjectedLqCoefficients {
        if self.nodes.len() == 1 {
            return self.nodes[0].clone();
        }
        let times = self.times();
        let (k, s) = bracket(&times, t);
        if s == 0.0 {
            self.nodes[k].clone()
        } else if s == 1.0 {
            self.nodes[k + 1].clone()
        } else {
            self.nodes[k].lerp(&self.nodes[k + 1], s)
        }
    }
}

fn pack(n: usize, s_mat: &Matrix, s_vec: &Vector, s_e: &Vector, s: f64) -> Vector {
    let mut y = Vector::zeros(n * n + 2 * n + 1);
    y.rows_mut(0, n * n).copy_from_slice(s_mat.as_slice());
    y.rows_mut(n * n, n).copy_from(s_vec);
    y.rows_mut(n * n + n, n).copy_from(s_e);
    y[n * n + 2 * n] = s;
    y
}

fn unpack(n: usize, y: &Vector) -> (Matrix, Vector, Vector, f64) {
    let mut s_mat = Matrix::from_column_slice(n, n, &y.as_slice()[..n * n]);
    symmetrize(&mut s_mat);
    (
        s_mat,
        y.rows(n * n, n).into(),
        y.rows(n * n + n, n).into(),
        y[n * n + 2 * n],
    )
}

/// Integrates the Riccati-like equations backward over one partition.
///
/// The LQ node times are forced integrator nodes, so the stored value
/// function is exact there.
pub fn solve_partition_backward(
    coeffs: &PartitionCoefficients,
    nominal: &TrajectorySegment,
    finals: &RiccatiFinalValues,
    settings: &IntegratorSettings,
) -> Result<ValueFunction> {
    let n = finals.s_vec.len();
    let times = coeffs.times();
    let (t0, t1) = (times[0], *times.last().unwrap());
    let y_final = pack(n, &finals.s_mat, &finals.s_vec, &finals.s_e, finals.s);
    let mut failure: Option<Error> = None;
    let rhs = |t: f64, y: &Vector| -> Vector {
        let (s_mat, s_vec, s_e, _) = unpack(n, y);
        match riccati_rhs(&coeffs.at(t), &s_mat, &s_vec, &s_e) {
            Ok(d) => pack(n, &d.s_mat, &d.s_vec, &d.s_e, d.s),
            Err(e) => {
                failure.get_or_insert(e.at_time(t));
                Vector::from_element(y.len(), f64::NAN)
            }
        }
    };
    let check = |t: f64, y: &Vector| -> Result<()> {
        let norm = y.rows(0, n * n).amax();
        if norm > RICCATI_BLOWUP {
            Err(Error::RiccatiBlowup { t, norm })
        } else {
            Ok(())
        }
    };
    let traj = if t1 > t0 {
        integrate_adaptive_with_stops(rhs, t1, t0, &y_final, &times, settings, check)
    } else {
        crate::ode::DenseTrajectory::new(vec![t1], vec![y_final.clone()], None)
    };
    let traj = match (traj, failure) {
        (Err(_), Some(f)) => return Err(f),
        (Err(e), None) => return Err(e),
        (Ok(t), _) => t,
    };

    let count = traj.len();
    let mut vf = ValueFunction {
        partition: coeffs.mode,
        times: Vec::with_capacity(count),
        s_mat: Vec::with_capacity(count),
        s_vec: Vec::with_capacity(count),
        s_e: Vec::with_capacity(count),
        s: Vec::with_capacity(count),
        nominal: Vec::with_capacity(count),
    };
    for k in (0..count).rev() {
        let t = traj.times()[k];
        let (s_mat, s_vec, s_e, s) = unpack(n, &traj.values()[k]);
        vf.times.push(t);
        vf.s_mat.push(s_mat);
        vf.s_vec.push(s_vec);
        vf.s_e.push(s_e);
        vf.s.push(s);
        vf.nominal.push(nominal.state_at(t.clamp(t0, t1))?);
    }
    Ok(vf)
}
