//! Independent reference solutions used by the integration tests.

#![allow(dead_code)]

use fastslq::linalg::{fd_gradient, fd_jacobian, relative_error, stack, Matrix, Vector};
use fastslq::lq::{
    fd_cost_expansion, fd_dynamics_jacobians, fd_inequality_input_jacobian,
    fd_state_constraint_jacobian, fd_state_input_constraint_jacobians,
};
use fastslq::model::{ModeSchedule, SwitchedProblem};
use fastslq::models::lti::{make_lti_problem, AffineConstraint, AffineStateConstraint, LtiSpec};
use fastslq::models::planar::{equilibrium_input, ContactMode, PlanarSetup, INPUT_DIM, STATE_DIM};
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut impl Rng, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0))
}

fn riccati_derivative(a: &Matrix, b: &Matrix, q: &Matrix, r_inv: &Matrix, s: &Matrix) -> Matrix {
    // dS/dτ in reversed time τ = T − t.
    let sb = s * b;
    a.transpose() * s + s * a - &sb * r_inv * sb.transpose() + q
}

/// `S(0)` of the finite-horizon LQR with terminal weight `q_f`, integrated
/// backward with classic RK4 at fixed step `h`.
pub fn rk4_riccati(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, q_f: &Matrix, horizon: f64, h: f64) -> Matrix {
    let r_inv = r.clone().try_inverse().unwrap();
    let steps = (horizon / h).round() as usize;
    let h = horizon / steps as f64;
    let mut s = q_f.clone();
    for _ in 0..steps {
        let k1 = riccati_derivative(a, b, q, &r_inv, &s);
        let k2 = riccati_derivative(a, b, q, &r_inv, &(&s + &k1 * (h / 2.0)));
        let k3 = riccati_derivative(a, b, q, &r_inv, &(&s + &k2 * (h / 2.0)));
        let k4 = riccati_derivative(a, b, q, &r_inv, &(&s + &k3 * h));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    (&s + s.transpose()) * 0.5
}

/// `X` with `MᵀX + XM + W = 0`, by Gaussian elimination on the Kronecker form.
pub fn lyapunov(m: &Matrix, w: &Matrix) -> Matrix {
    let n = m.nrows();
    let mut big = Matrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            let row = i + j * n;
            for k in 0..n {
                big[(row, i + k * n)] += m[(k, j)];
                big[(row, k + j * n)] += m[(k, i)];
            }
        }
    }
    let rhs = -Vector::from_column_slice(w.as_slice());
    let x = big.full_piv_lu().solve(&rhs).unwrap();
    let x = Matrix::from_column_slice(n, n, x.as_slice());
    (&x + x.transpose()) * 0.5
}

/// Stabilizing ARE solution: RK4 Riccati flow run to steady state, then
/// Newton–Kleinman iterations.
pub fn are(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Matrix {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().unwrap();
    let mut s = Matrix::zeros(n, n);
    let h = 1e-3;
    for _ in 0..200_000 {
        let k1 = riccati_derivative(a, b, q, &r_inv, &s);
        let k2 = riccati_derivative(a, b, q, &r_inv, &(&s + &k1 * (h / 2.0)));
        let k3 = riccati_derivative(a, b, q, &r_inv, &(&s + &k2 * (h / 2.0)));
        let k4 = riccati_derivative(a, b, q, &r_inv, &(&s + &k3 * h));
        let ds = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        s += &ds;
        if ds.amax() < 1e-14 * s.amax().max(1.0) {
            break;
        }
    }
    for _ in 0..6 {
        let k = &r_inv * b.transpose() * &s;
        let m = a - b * &k;
        let w = q + k.transpose() * r * &k;
        s = lyapunov(&m, &w);
    }
    s
}

/// Matrix exponential by scaling and squaring of a degree-24 Taylor series.
pub fn expm(m: &Matrix) -> Matrix {
    let n = m.nrows();
    let norm = m.amax() * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut term = Matrix::identity(n, n);
    let mut sum = Matrix::identity(n, n);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Explicit-Euler transcription of
/// `min Σ h(½xᵀQx + ½uᵀRu) + ½x_Nᵀ Q_f x_N` subject to
/// `x_{k+1} = x_k + h(A x_k + B u_k)` and `C x_k + D u_k + e = 0` for
/// the steps `k ≥ constrained_from`, condensed onto the inputs and solved
/// through its KKT system.
/// Returns the states `x_0 … x_N`.
#[allow(clippy::too_many_arguments)]
pub fn kkt_transcription(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    q_f: &Matrix,
    constraint: Option<(&Matrix, &Matrix, &Vector)>,
    constrained_from: usize,
    x0: &Vector,
    horizon: f64,
    steps: usize,
) -> Vec<Vector> {
    let (n, m) = (a.nrows(), b.ncols());
    let h = horizon / steps as f64;
    let phi = Matrix::identity(n, n) + a * h;
    let gamma = b * h;
    // x_k = free[k] + g[k] · U
    let mut free = vec![x0.clone()];
    let mut g = vec![Matrix::zeros(n, steps * m)];
    for k in 0..steps {
        free.push(&phi * &free[k]);
        let mut next = &phi * &g[k];
        let mut block = next.view_mut((0, k * m), (n, m));
        block += &gamma;
        g.push(next);
    }
    let vars = steps * m;
    let mut hess = Matrix::zeros(vars, vars);
    let mut grad = Vector::zeros(vars);
    for k in 0..=steps {
        let weight = if k == steps { q_f.clone() } else { q * h };
        let gw = g[k].transpose() * &weight;
        hess += &gw * &g[k];
        grad += &gw * &free[k];
    }
    for k in 0..steps {
        let mut block = hess.view_mut((k * m, k * m), (m, m));
        block += r * h;
    }
    let active = steps.saturating_sub(constrained_from);
    let rows = constraint.map_or(0, |(c, _, _)| c.nrows()) * active;
    let mut kkt = Matrix::zeros(vars + rows, vars + rows);
    let mut rhs = Vector::zeros(vars + rows);
    kkt.view_mut((0, 0), (vars, vars)).copy_from(&hess);
    rhs.rows_mut(0, vars).copy_from(&(-&grad));
    if let Some((c, d, e)) = constraint {
        let p = c.nrows();
        for k in constrained_from..steps {
            let mut jac = c * &g[k];
            let mut block = jac.view_mut((0, k * m), (p, m));
            block += d;
            let row = vars + (k - constrained_from) * p;
            kkt.view_mut((row, 0), (p, vars)).copy_from(&jac);
            kkt.view_mut((0, row), (vars, p)).copy_from(&jac.transpose());
            rhs.rows_mut(row, p).copy_from(&(-(c * &free[k] + e)));
        }
    }
    let sol = kkt.lu().solve(&rhs).unwrap();
    let u = sol.rows(0, vars).into_owned();
    (0..=steps).map(|k| &free[k] + &g[k] * &u).collect()
}

/// `MMᵀ + shift·I` for a random square `M`.
pub fn random_spd(rng: &mut impl Rng, n: usize, shift: f64) -> Matrix {
    let m = random_matrix(rng, n, n);
    &m * m.transpose() + Matrix::identity(n, n) * shift
}

/// Orthonormal basis of the null space of a full-row-rank `D`, from the
/// eigenvectors of `DᵀD` with the smallest eigenvalues.
pub fn null_space(d: &Matrix) -> Matrix {
    let m = d.ncols();
    let rank = d.nrows();
    let eig = nalgebra::SymmetricEigen::new(d.transpose() * d);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let cols: Vec<Vector> = order[..m - rank]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        Matrix::zeros(m, 0)
    } else {
        Matrix::from_columns(&cols)
    }
}

/// Smallest singular value.
pub fn min_singular_value(m: &Matrix) -> f64 {
    m.clone().svd(false, false).singular_values.min()
}

/// Compares every analytic derivative of mode `i` with central differences
/// (1e-5 relative).
pub fn derivative_mismatch(problem: &SwitchedProblem, i: usize, x: &Vector, u: &Vector, t: f64) -> Result<(), String> {
    let sys = problem.subsystem(i);
    let cost = problem.cost(i);
    let check = |name: &str, a: &Matrix, b: &Matrix| {
        let err = relative_error(a, b);
        if err <= 1e-5 {
            Ok(())
        } else {
            Err(format!("mode {i}, t = {t}: {name} off by {err:e}"))
        }
    };

    let (a, b) = sys.flow_jacobians(x, u, t).ok_or("no analytic flow Jacobians")?;
    let (a_fd, b_fd) = fd_dynamics_jacobians(sys, x, u, t);
    check("∂f/∂x", &a, &a_fd)?;
    check("∂f/∂u", &b, &b_fd)?;

    if !sys.state_input_constraint(x, u, t).is_empty() {
        let (c, d) = sys
            .state_input_constraint_jacobians(x, u, t)
            .ok_or("no analytic constraint Jacobians")?;
        let (c_fd, d_fd) = fd_state_input_constraint_jacobians(sys, x, u, t);
        check("∂g1/∂x", &c, &c_fd)?;
        check("∂g1/∂u", &d, &d_fd)?;
    }
    if !sys.state_constraint(x, t).is_empty() {
        let f = sys.state_constraint_jacobian(x, t).ok_or("no analytic state-constraint Jacobian")?;
        check("∂g2/∂x", &f, &fd_state_constraint_jacobian(sys, x, t))?;
    }
    if !sys.inequality(x, u, t).is_empty() {
        let h = sys.inequality_input_jacobian(x, u, t).ok_or("no analytic inequality Jacobian")?;
        check("∂h/∂u", &h, &fd_inequality_input_jacobian(sys, x, u, t))?;
    }

    // Gradients against differences of values, Hessians against
    // differences of the (already checked) analytic gradient.
    let exp = cost.running_expansion(x, u, t).ok_or("no analytic cost expansion")?;
    let fd = fd_cost_expansion(cost, x, u, t);
    let col = |v: &Vector| Matrix::from_column_slice(v.len(), 1, v.as_slice());
    check("∂L/∂x", &col(&exp.dx), &col(&fd.dx))?;
    check("∂L/∂u", &col(&exp.du), &col(&fd.du))?;
    let (n, m) = (x.len(), u.len());
    let grad = |z: &Vector| {
        let e = cost
            .running_expansion(&z.rows(0, n).into(), &z.rows(n, m).into(), t)
            .unwrap();
        stack(&e.dx, &e.du)
    };
    let hess_fd = fd_jacobian(grad, &stack(x, u));
    check("∂²L/∂x²", &exp.dxx, &hess_fd.view((0, 0), (n, n)).into())?;
    check("∂²L/∂u²", &exp.duu, &hess_fd.view((n, n), (m, m)).into())?;
    check("∂²L/∂x∂u", &exp.dxu, &hess_fd.view((0, n), (n, m)).into())?;

    let term = cost.terminal_expansion(x).ok_or("no analytic terminal expansion")?;
    check("∂Φ/∂x", &col(&term.dx), &col(&fd_gradient(|x| cost.terminal(x), x)))?;
    let term_hess_fd = fd_jacobian(|x| cost.terminal_expansion(x).unwrap().dx, x);
    check("∂²Φ/∂x²", &term.dxx, &term_hess_fd)?;
    Ok(())
}

pub fn planar_problem() -> (PlanarSetup, SwitchedProblem) {
    let setup = PlanarSetup::default();
    let schedule = ModeSchedule::new(vec![0.0, 0.4, 0.8, 1.2], vec![0, 1, 2]).unwrap();
    let problem = setup.build(&schedule, setup.params.standing_state(0.0)).unwrap();
    (setup, problem)
}

pub fn lti_problem(seed: u64) -> SwitchedProblem {
    let mut rng = rng(seed);
    let (n, m) = (4, 3);
    let spec = LtiSpec::new(
        random_matrix(&mut rng, n, n),
        random_matrix(&mut rng, n, m),
        random_spd(&mut rng, n, 0.1),
        random_spd(&mut rng, m, 0.5),
        random_spd(&mut rng, n, 0.0),
        random_vector(&mut rng, n),
    )
    .with_switching_times(vec![0.0, 0.5, 1.0])
    .with_constraint(
        0,
        AffineConstraint {
            c: random_matrix(&mut rng, 2, n),
            d: random_matrix(&mut rng, 2, m),
            e: random_vector(&mut rng, 2),
        },
    )
    .with_state_constraint(
        1,
        AffineStateConstraint {
            f: random_matrix(&mut rng, 1, n),
            h: random_vector(&mut rng, 1),
        },
    );
    make_lti_problem(&spec).unwrap()
}

pub fn planar_point(setup: &PlanarSetup, mode: usize, rng: &mut impl Rng) -> (Vector, Vector, f64) {
    let t = 0.4 * mode as f64 + rng.gen_range(0.0..0.4);
    let x = setup.params.standing_state(0.0) + random_vector(rng, STATE_DIM) * 0.2;
    let contact = ContactMode::from_id(mode).unwrap();
    let u = equilibrium_input(&setup.params, contact, None, t) + random_vector(rng, INPUT_DIM) * 20.0;
    (x, u, t)
}
