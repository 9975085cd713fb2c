//! Small dense linear-algebra helpers shared by the solver stages.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative finite-difference step `η` (2^-17).
pub const FD_STEP: f64 = 1.0 / 131072.0;

pub fn fd_step(value: f64) -> f64 {
    FD_STEP * value.abs().max(1.0)
}

pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: Matrix) -> Matrix {
    symmetrize(&mut m);
    m
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrized(m.clone()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_finite_matrix(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_finite_vector(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Central-difference Jacobian of `f` at `z`.
pub fn fd_jacobian<F>(mut f: F, z: &Vector) -> Matrix
where
    F: FnMut(&Vector) -> Vector,
{
    let mut probe = z.clone();
    let mut columns = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        let h = fd_step(z[j]);
        probe[j] = z[j] + h;
        let plus = f(&probe);
        probe[j] = z[j] - h;
        let minus = f(&probe);
        probe[j] = z[j];
        columns.push((plus - minus) / (2.0 * h));
    }
    if columns.is_empty() {
        let rows = f(z).len();
        return Matrix::zeros(rows, 0);
    }
    Matrix::from_columns(&columns)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(mut f: F, z: &Vector) -> Vector
where
    F: FnMut(&Vector) -> f64,
{
    let mut probe = z.clone();
    Vector::from_fn(z.len(), |j, _| {
        let h = fd_step(z[j]);
        probe[j] = z[j] + h;
        let plus = f(&probe);
        probe[j] = z[j] - h;
        let minus = f(&probe);
        probe[j] = z[j];
        (plus - minus) / (2.0 * h)
    })
}

/// Central second differences of a scalar function.
pub fn fd_hessian<F>(mut f: F, z: &Vector) -> Matrix
where
    F: FnMut(&Vector) -> f64,
{
    let n = z.len();
    let mut hess = Matrix::zeros(n, n);
    let mut probe = z.clone();
    let f0 = f(z);
    for i in 0..n {
        let hi = fd_step(z[i]);
        probe[i] = z[i] + 2.0 * hi;
        let pp = f(&probe);
        probe[i] = z[i] - 2.0 * hi;
        let mm = f(&probe);
        probe[i] = z[i];
        hess[(i, i)] = (pp - 2.0 * f0 + mm) / (4.0 * hi * hi);
        for j in (i + 1)..n {
            let hj = fd_step(z[j]);
            let mut eval = |si: f64, sj: f64| {
                probe[i] = z[i] + si * hi;
                probe[j] = z[j] + sj * hj;
                let v = f(&probe);
                probe[i] = z[i];
                probe[j] = z[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// `‖a − b‖∞ / max(1, ‖b‖∞)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).amax();
    diff / b.amax().max(1.0)
}

/// Concatenates `x` and `u` into one vector.
pub fn stack(x: &Vector, u: &Vector) -> Vector {
    let mut z = Vector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

pub fn lerp_matrix(a: &Matrix, b: &Matrix, s: f64) -> Matrix {
    a + (b - a) * s
}

pub fn lerp_vector(a: &Vector, b: &Vector, s: f64) -> Vector {
    a + (b - a) * s
}

pub fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

/// Locates `t` in ascending `times`: returns `(k, s)` with
/// `t ≈ times[k] + s (times[k+1] − times[k])`, `s ∈ [0, 1]`.
/// Times outside the grid are clamped to its ends.
pub fn bracket(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    if n < 2 || t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 2, 1.0);
    }
    let k = times.partition_point(|&tk| tk <= t).clamp(1, n - 1) - 1;
    let span = times[k + 1] - times[k];
    let s = if span > 0.0 { (t - times[k]) / span } else { 0.0 };
    (k, s.clamp(0.0, 1.0))
}
