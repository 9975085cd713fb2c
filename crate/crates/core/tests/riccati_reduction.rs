mod common;

use common::{min_singular_value, null_space, random_matrix, random_spd, random_vector, rng};
use fastslq::linalg::{Matrix, Vector};
use fastslq::lq::LqNode;
use fastslq::riccati::{project_constraints, riccati_rhs};
use proptest::prelude::*;
use rand::Rng;

fn node(seed: u64, n: usize, m: usize, c1: usize, c2: usize) -> LqNode {
    let mut rng = rng(seed);
    LqNode {
        t: 0.0,
        a: random_matrix(&mut rng, n, n),
        b: random_matrix(&mut rng, n, m),
        c: random_matrix(&mut rng, c1, n),
        d: random_matrix(&mut rng, c1, m),
        e: Vector::zeros(c1),
        f: random_matrix(&mut rng, c2, n),
        h: random_vector(&mut rng, c2),
        q: rng.gen_range(0.0..2.0),
        q_vec: random_vector(&mut rng, n),
        r_vec: random_vector(&mut rng, m),
        p: random_matrix(&mut rng, n, m) * 0.2,
        q_mat: random_spd(&mut rng, n, 0.5),
        r_mat: random_spd(&mut rng, m, 1.0),
    }
}

fn value_point(seed: u64, n: usize) -> (Matrix, Vector, Vector) {
    let mut rng = rng(seed ^ 0x5eed);
    let s = random_matrix(&mut rng, n, n);
    ((&s + s.transpose()) * 2.0, random_vector(&mut rng, n), random_vector(&mut rng, n))
}

/// Textbook LQ value-function derivatives for `ẋ = Ax + Bu` with cost
/// `q + q⃗ᵀx + rᵀu + xᵀPu + ½xᵀQx + ½uᵀRu`, returned as
/// `(−Ṡ, −ṡ⃗, −ṡ)`.
#[allow(clippy::too_many_arguments)]
fn textbook(
    a: &Matrix,
    b: &Matrix,
    q: f64,
    q_vec: &Vector,
    r_vec: &Vector,
    p: &Matrix,
    q_mat: &Matrix,
    r_mat: &Matrix,
    s: &Matrix,
    s_vec: &Vector,
) -> (Matrix, Vector, f64) {
    let r_inv = r_mat.clone().try_inverse().unwrap();
    let k = s * b + p;
    let neg_ds = a.transpose() * s + s * a - &k * &r_inv * k.transpose() + q_mat;
    let g = r_vec + b.transpose() * s_vec;
    let neg_dsv = a.transpose() * s_vec - &k * &r_inv * &g + q_vec;
    let neg_dscalar = q - 0.5 * g.dot(&(&r_inv * &g));
    (neg_ds, neg_dsv, neg_dscalar)
}

fn scale(m: &Matrix) -> f64 {
    m.amax().max(1.0)
}

#[test]
fn unconstrained_rhs_is_the_textbook_riccati_equation() {
    for k in 0..100u64 {
        let lq = node(k, 4, 2, 0, 0);
        let (s, s_vec, s_e) = value_point(k, 4);
        let coeffs = project_constraints(&lq, 0.0).unwrap();
        let d = riccati_rhs(&coeffs, &s, &s_vec, &s_e).unwrap();
        let (neg_ds, neg_dsv, neg_scalar) =
            textbook(&lq.a, &lq.b, lq.q, &lq.q_vec, &lq.r_vec, &lq.p, &lq.q_mat, &lq.r_mat, &s, &s_vec);
        assert!((&d.s_mat + &neg_ds).amax() < 1e-12, "S at point {k}");
        assert!((&d.s_vec + &neg_dsv).amax() < 1e-12, "s vector at point {k}");
        assert!((d.s + neg_scalar).abs() < 1e-12, "scalar at point {k}");
    }
}

#[test]
fn constraint_correction_stays_zero_without_constraints() {
    let lq = node(3, 5, 3, 0, 0);
    let (s, s_vec, _) = value_point(3, 5);
    let coeffs = project_constraints(&lq, 0.0).unwrap();
    let d = riccati_rhs(&coeffs, &s, &s_vec, &Vector::zeros(5)).unwrap();
    assert_eq!(d.s_e.amax(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_a_right_inverse_and_idempotent(
        seed in any::<u64>(),
        n in 1usize..6,
        m in 1usize..5,
        c1 in 1usize..5,
    ) {
        prop_assume!(c1 <= m);
        let lq = node(seed, n, m, c1, 0);
        prop_assume!(min_singular_value(&lq.d) > 1e-2);
        let p = project_constraints(&lq, 0.0).unwrap();
        let eye = Matrix::identity(c1, c1);
        prop_assert!((&lq.d * &p.d_pinv - eye).amax() < 1e-10);
        let sq = &p.free * &p.free;
        prop_assert!((&sq - &p.free).amax() < 1e-8 * scale(&p.free));
        // The free directions cannot move the constraint.
        prop_assert!((&lq.d * &p.free).amax() < 1e-10 * scale(&lq.d));
        prop_assert!(p.r_tilde.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn projected_rhs_matches_null_space_reduction(
        seed in any::<u64>(),
        n in 1usize..6,
        m in 2usize..5,
        c1 in 1usize..4,
    ) {
        prop_assume!(c1 < m);
        let lq = node(seed, n, m, c1, 0);
        prop_assume!(min_singular_value(&lq.d) > 1e-2);
        let (s, s_vec, s_e) = value_point(seed, n);
        let coeffs = project_constraints(&lq, 0.0).unwrap();
        let d = riccati_rhs(&coeffs, &s, &s_vec, &s_e).unwrap();

        // u = G x + N v satisfies C x + D u = 0 for every v.
        let g = -lq.d.clone().pseudo_inverse(1e-14).unwrap() * &lq.c;
        let null = null_space(&lq.d);
        let a_z = &lq.a + &lq.b * &g;
        let b_z = &lq.b * &null;
        let pg = &lq.p * &g;
        let q_z = &lq.q_mat + &pg + pg.transpose() + g.transpose() * &lq.r_mat * &g;
        let p_z = (&lq.p + g.transpose() * &lq.r_mat) * &null;
        let r_z = null.transpose() * &lq.r_mat * &null;
        let qv_z = &lq.q_vec + g.transpose() * &lq.r_vec;
        let rv_z = null.transpose() * &lq.r_vec;
        let (neg_ds, neg_dsv, neg_scalar) =
            textbook(&a_z, &b_z, lq.q, &qv_z, &rv_z, &p_z, &q_z, &r_z, &s, &s_vec);
        prop_assert!((&d.s_mat + &neg_ds).amax() < 1e-8 * scale(&neg_ds));
        prop_assert!((&d.s_vec + &neg_dsv).amax() < 1e-8 * neg_dsv.amax().max(1.0));
        prop_assert!((d.s + neg_scalar).abs() < 1e-8 * neg_scalar.abs().max(1.0));
    }

    #[test]
    fn state_constraint_enters_as_quadratic_penalty(
        seed in any::<u64>(),
        n in 1usize..6,
        m in 1usize..4,
        c2 in 1usize..3,
        rho in 0.0f64..1e3,
    ) {
        let lq = node(seed, n, m, 0, c2);
        let (s, s_vec, s_e) = value_point(seed, n);
        let coeffs = project_constraints(&lq, rho).unwrap();
        let d = riccati_rhs(&coeffs, &s, &s_vec, &s_e).unwrap();
        let q_pen = &lq.q_mat + lq.f.transpose() * &lq.f * rho;
        let qv_pen = &lq.q_vec + lq.f.transpose() * &lq.h * rho;
        let (neg_ds, neg_dsv, _) =
            textbook(&lq.a, &lq.b, lq.q, &qv_pen, &lq.r_vec, &lq.p, &q_pen, &lq.r_mat, &s, &s_vec);
        prop_assert!((&d.s_mat + &neg_ds).amax() < 1e-10 * scale(&neg_ds));
        prop_assert!((&d.s_vec + &neg_dsv).amax() < 1e-10 * neg_dsv.amax().max(1.0));
    }

    #[test]
    fn projected_input_hessian_is_positive_semidefinite(
        seed in any::<u64>(),
        n in 1usize..5,
        m in 1usize..5,
        c1 in 0usize..4,
    ) {
        prop_assume!(c1 <= m);
        let lq = node(seed, n, m, c1, 0);
        prop_assume!(c1 == 0 || min_singular_value(&lq.d) > 1e-2);
        let p = project_constraints(&lq, 0.0).unwrap();
        let eig = nalgebra::SymmetricEigen::new(p.r_tilde.clone()).eigenvalues;
        prop_assert!(eig.iter().all(|&l| l > -1e-9 * scale(&lq.r_mat)));
        let sym = (&p.r_tilde - p.r_tilde.transpose()).amax();
        prop_assert!(sym == 0.0);
    }
}

#[test]
fn duplicated_constraint_rows_are_regularized() {
    let mut lq = node(9, 3, 3, 2, 0);
    let row = lq.d.row(0).into_owned();
    lq.d.set_row(1, &row);
    let p = project_constraints(&lq, 0.0).unwrap();
    assert!(p.d_pinv.iter().all(|v| v.is_finite()));
    assert!((&lq.d * &p.d_pinv * &lq.d - &lq.d).amax() < 1e-6);
}

#[test]
fn vanishing_constraint_jacobian_is_rejected() {
    let mut lq = node(9, 3, 3, 2, 0);
    lq.d.fill(0.0);
    assert!(project_constraints(&lq, 0.0).is_err());
}
