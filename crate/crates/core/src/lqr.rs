//! Infinite-horizon LQR used as the terminal cost-to-go of the MPC horizon.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{is_finite_matrix, symmetrize, Matrix, Vector};
use crate::lq::linearize_dynamics;
use crate::model::{QuadraticValue, Subsystem};
use crate::ode::{integrate_adaptive, IntegratorSettings};

const SETTLE_CHUNK: f64 = 1.0;
const MAX_CHUNKS: usize = 400;
const SETTLE_TOL: f64 = 1e-9;
const DIVERGENCE: f64 = 1e12;
const NEWTON_STEPS: usize = 4;
const SIGN_STEPS: usize = 100;
const SIGN_TOL: f64 = 1e-13;

/// Residual `AᵀS + SA − SBR⁻¹BᵀS + Q` of the algebraic Riccati equation.
pub fn care_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, s: &Matrix) -> Result<Matrix> {
    let r_inv = Cholesky::new(r.clone())
        .ok_or_else(|| Error::InvalidSettings("LQR input weight must be positive definite".into()))?
        .inverse();
    let sb = s * b;
    Ok(a.transpose() * s + s * a - &sb * r_inv * sb.transpose() + q)
}

/// Solves `(A_cl)ᵀX + X A_cl + W = 0` through its Kronecker form.
pub fn solve_lyapunov(a_cl: &Matrix, w: &Matrix) -> Option<Matrix> {
    let n = a_cl.nrows();
    let eye = Matrix::identity(n, n);
    let at = a_cl.transpose();
    let big = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -Vector::from_column_slice(w.as_slice());
    let sol = big.lu().solve(&rhs)?;
    let mut x = Matrix::from_column_slice(n, n, sol.as_slice());
    symmetrize(&mut x);
    is_finite_matrix(&x).then_some(x)
}

pub fn is_hurwitz(m: &Matrix) -> bool {
    m.complex_eigenvalues().iter().all(|ev| ev.re < 0.0)
}

/// Stabilizing solution of the continuous algebraic Riccati equation.
///
/// The matrix sign function of the Hamiltonian gives the stable invariant
/// subspace directly; when that iteration fails the Riccati differential
/// equation is run from `S = 0` until it settles. Either way a few
/// Newton–Kleinman steps polish the result, and the closed loop must be
/// Hurwitz.
pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::DimensionMismatch("LQR matrices".into()));
    }
    let r_inv = Cholesky::new(r.clone())
        .ok_or_else(|| Error::InvalidSettings("LQR input weight must be positive definite".into()))?
        .inverse();
    let br = b * &r_inv * b.transpose();
    let mut s = match care_by_sign(a, &br, q) {
        Some(s) => s,
        None => care_by_settling(a, &br, q)?,
    };
    for _ in 0..NEWTON_STEPS {
        let k = &r_inv * b.transpose() * &s;
        let a_cl = a - b * &k;
        if !is_hurwitz(&a_cl) {
            break;
        }
        let w = q + k.transpose() * r * &k;
        match solve_lyapunov(&a_cl, &w) {
            Some(next) => s = next,
            None => break,
        }
    }
    let k = &r_inv * b.transpose() * &s;
    if !is_hurwitz(&(a - b * k)) && n > 0 {
        return Err(Error::Unstabilizable(
            "closed loop of the Riccati solution is not stable".into(),
        ));
    }
    Ok(s)
}

/// Sign-function iteration on `H = [A, −BR⁻¹Bᵀ; −Q, −Aᵀ]` with determinant
/// scaling; `S` solves `[W₁₂; W₂₂ + I] S = −[W₁₁ + I; W₂₁]`.
fn care_by_sign(a: &Matrix, br: &Matrix, q: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    if n == 0 {
        return Some(Matrix::zeros(0, 0));
    }
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-br));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    let mut converged = false;
    for _ in 0..SIGN_STEPS {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let inv = lu.try_inverse()?;
        let scale = if det.is_finite() && det != 0.0 {
            det.abs().powf(-1.0 / (2 * n) as f64)
        } else {
            1.0
        };
        let next = (&z * scale + inv / scale) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if !is_finite_matrix(&z) {
            return None;
        }
        if change < SIGN_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let eye = Matrix::identity(n, n);
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(z.view((0, 0), (n, n)) + &eye));
    rhs.view_mut((n, 0), (n, n)).copy_from(&z.view((n, 0), (n, n)));
    let svd = lhs.svd(true, true);
    let mut s = -svd.solve(&rhs, 1e-12 * svd.singular_values.max()).ok()?;
    symmetrize(&mut s);
    is_finite_matrix(&s).then_some(s)
}

fn care_by_settling(a: &Matrix, br: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let rhs = |_t: f64, y: &Vector| {
        let s = Matrix::from_column_slice(n, n, y.as_slice());
        let mut ds = a.transpose() * &s + &s * a - &s * br * &s + q;
        symmetrize(&mut ds);
        Vector::from_column_slice(ds.as_slice())
    };
    let settings = IntegratorSettings::default().with_tolerances(1e-10, 1e-10);
    let mut y = Vector::zeros(n * n);
    for _ in 0..MAX_CHUNKS {
        let traj = integrate_adaptive(rhs, 0.0, SETTLE_CHUNK, &y, &settings)
            .map_err(|e| Error::Unstabilizable(format!("Riccati iteration failed: {e}")))?;
        let next = traj.last().clone();
        if next.amax() > DIVERGENCE {
            return Err(Error::Unstabilizable("Riccati iteration diverged".into()));
        }
        let change = (&next - &y).amax() / next.amax().max(1.0);
        y = next;
        if change < SETTLE_TOL {
            let mut s = Matrix::from_column_slice(n, n, y.as_slice());
            symmetrize(&mut s);
            return Ok(s);
        }
    }
    Err(Error::Unstabilizable("Riccati iteration did not settle".into()))
}

/// Gain `K = −R⁻¹BᵀS` and value `½(x − x_ref)ᵀ S (x − x_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalLqr {
    pub gain: Matrix,
    pub value: QuadraticValue,
    pub input_reference: Vector,
}

impl TerminalLqr {
    /// `u = u_ref + K (x − x_ref)`.
    pub fn input(&self, x: &Vector) -> Vector {
        &self.input_reference + &self.gain * (x - &self.value.reference)
    }
}

/// LQR for `sys` linearized at `(x_lin, u_lin)`.
pub fn design_terminal_lqr(
    sys: &dyn Subsystem,
    x_lin: &Vector,
    u_lin: &Vector,
    t: f64,
    q: &Matrix,
    r: &Matrix,
) -> Result<TerminalLqr> {
    let (a, b) = linearize_dynamics(sys, x_lin, u_lin, t)?;
    let s = solve_care(&a, &b, q, r)?;
    let r_inv = Cholesky::new(r.clone())
        .ok_or_else(|| Error::InvalidSettings("LQR input weight must be positive definite".into()))?
        .inverse();
    Ok(TerminalLqr {
        gain: -(r_inv * b.transpose() * &s),
        value: QuadraticValue {
            hessian: s,
            reference: x_lin.clone(),
            offset: 0.0,
        },
        input_reference: u_lin.clone(),
    })
}
