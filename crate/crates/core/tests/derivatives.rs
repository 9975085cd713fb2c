mod common;

use common::{derivative_mismatch, lti_problem, planar_point, planar_problem, random_vector, rng};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn planar_derivatives_match_central_differences() {
    let (setup, problem) = planar_problem();
    let mut rng = rng(21);
    for mode in 0..3 {
        for _ in 0..100 {
            let (x, u, t) = planar_point(&setup, mode, &mut rng);
            derivative_mismatch(&problem, mode, &x, &u, t).unwrap();
        }
    }
}

#[test]
fn lti_derivatives_match_central_differences() {
    let problem = lti_problem(4);
    let mut rng = rng(22);
    for mode in 0..2 {
        for _ in 0..100 {
            let x = random_vector(&mut rng, 4) * 3.0;
            let u = random_vector(&mut rng, 3) * 3.0;
            let t = 0.5 * mode as f64 + rng.gen_range(0.0..0.5);
            derivative_mismatch(&problem, mode, &x, &u, t).unwrap();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planar_derivatives_hold_anywhere_near_standing(seed in any::<u64>(), mode in 0usize..3) {
        let (setup, problem) = planar_problem();
        let mut rng = rng(seed);
        let (x, u, t) = planar_point(&setup, mode, &mut rng);
        prop_assert!(derivative_mismatch(&problem, mode, &x, &u, t).is_ok());
    }
}
