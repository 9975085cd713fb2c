use std::sync::OnceLock;

use fastslq::linalg::Vector;
use fastslq::lq::build_lq_approximation;
use fastslq::model::{ModeSchedule, SwitchedProblem};
use fastslq::models::planar::*;
use fastslq::mpc::GaitPattern;
use fastslq::policy::LinearFeedbackPolicy;
use fastslq::solver::*;

fn settings(parallel: bool) -> SolverSettings {
    let mut s = SolverSettings {
        parallel_backward: parallel,
        convergence_tol: 1e-7,
        ..SolverSettings::default()
    };
    s.forward = s.forward.with_max_step(0.02).with_tolerances(1e-9, 1e-9);
    s.backward = s.backward.with_tolerances(1e-9, 1e-9);
    s
}

fn trot() -> (PlanarSetup, SwitchedProblem, LinearFeedbackPolicy) {
    let setup = PlanarSetup::default();
    let gait = GaitPattern::uniform(vec![1, 2], 0.4).unwrap();
    let problem = make_planar_trot_problem(&setup, &gait, 0.0, 4, setup.params.standing_state(0.0)).unwrap();
    let contacts: Vec<ContactMode> = (0..4).map(|k| ContactMode::from_id(gait.phase(k).0).unwrap()).collect();
    let policy = planar_initial_policy(&problem, &setup, &contacts, 0.02);
    (setup, problem, policy)
}

struct Solved {
    setup: PlanarSetup,
    problem: SwitchedProblem,
    outcome: SolveOutcome,
}

fn solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| {
        let (setup, problem, policy) = trot();
        let outcome = solve(&problem, policy, &settings(false)).unwrap();
        Solved {
            setup,
            problem,
            outcome,
        }
    })
}

/// The trot alternates the two diagonal-swing phases from mode 0.
fn contact(mode: usize) -> ContactMode {
    ContactMode::from_id([1, 2][mode % 2]).unwrap()
}

#[test]
fn converged_trot_satisfies_the_equality_constraints() {
    let s = solved();
    assert!(s.outcome.report.converged);
    let g1 = s.problem.max_state_input_violation(&s.outcome.trajectory);
    assert!(g1 <= 1e-4, "‖g1‖∞ = {g1:e}");
}

#[test]
fn contact_forces_stay_in_the_friction_cone() {
    let s = solved();
    let mu = s.setup.params.friction;
    for (i, seg) in s.outcome.trajectory.segments().iter().enumerate() {
        let c = contact(i);
        for (t, _, u) in seg.nodes() {
            for j in (0..2).filter(|&j| c.in_stance(j)) {
                let (lx, lz) = (u[FORCE[j]], u[FORCE[j] + 1]);
                assert!(lz >= -1e-6, "t = {t}: λz = {lz}");
                assert!(lx.abs() <= mu * lz + 1e-6, "t = {t}: λ = ({lx}, {lz})");
            }
        }
    }
}

#[test]
fn vertical_forces_carry_the_weight_over_a_gait_cycle() {
    let s = solved();
    let p = &s.setup.params;
    let (t0, t1) = (0.8, 1.6);
    let mut impulse = 0.0;
    for seg in s.outcome.trajectory.segments() {
        if seg.start_time() < t0 - 1e-9 || seg.end_time() > t1 + 1e-9 {
            continue;
        }
        impulse += seg.integrate(|_, u, _| u[FORCE[0] + 1] + u[FORCE[1] + 1]).unwrap();
    }
    let mean = impulse / (t1 - t0);
    let weight = p.mass * p.gravity;
    assert!((mean - weight).abs() <= 0.02 * weight, "mean vertical force {mean} vs weight {weight}");
}

#[test]
fn swing_foot_follows_its_height_profile() {
    let s = solved();
    for (i, seg) in s.outcome.trajectory.segments().iter().enumerate() {
        let c = contact(i);
        let profile = SwingProfile::new(seg.start_time(), seg.end_time(), s.setup.params.swing_apex).unwrap();
        let j = (0..2).find(|&j| !c.in_stance(j)).unwrap();
        let z0 = seg.initial_state()[FOOT[j] + 1];
        for (t, x, u) in seg.nodes() {
            let (height, velocity) = swing_c(&profile, t).unwrap();
            assert!((u[FOOT_VEL[j] + 1] - velocity).abs() <= 1e-4, "t = {t}");
            assert!((x[FOOT[j] + 1] - z0 - height).abs() <= 1e-4, "t = {t}");
        }
    }
}

#[test]
fn stance_feet_do_not_move() {
    let s = solved();
    for (i, seg) in s.outcome.trajectory.segments().iter().enumerate() {
        let c = contact(i);
        for j in (0..2).filter(|&j| c.in_stance(j)) {
            let start = seg.initial_state().rows(FOOT[j], 2).into_owned();
            for (t, x, u) in seg.nodes() {
                assert!(u.rows(FOOT_VEL[j], 2).amax() <= 1e-4, "t = {t}");
                assert!((x.rows(FOOT[j], 2) - &start).amax() <= 1e-4, "t = {t}");
            }
        }
    }
}

#[test]
fn accepted_sequential_iterations_decrease_the_merit() {
    let report = &solved().outcome.report;
    let mut last = report.merits[0];
    for (k, alpha) in report.alphas.iter().enumerate() {
        let merit = report.merits[k + 1];
        if alpha.is_some() {
            assert!(merit < last, "iteration {}: merit {merit} after {last}", k + 1);
        } else {
            assert_eq!(merit, last);
        }
        last = merit;
    }
    assert!(report.modes.iter().all(|m| *m == BackwardMode::Sequential));
}

#[test]
fn lq_approximation_does_not_depend_on_pool_size() {
    let s = solved();
    let one = build_lq_approximation(&s.problem, &s.outcome.trajectory, &make_pool(1).unwrap()).unwrap();
    let four = build_lq_approximation(&s.problem, &s.outcome.trajectory, &make_pool(4).unwrap()).unwrap();
    assert!(one == four);
}

#[test]
fn parallel_solves_do_not_depend_on_thread_count() {
    let (_, problem, policy) = trot();
    let mut costs = Vec::new();
    for threads in [1, 3] {
        let s = SolverSettings {
            num_threads: threads,
            max_iterations: 4,
            ..settings(true)
        };
        costs.push(solve(&problem, policy.clone(), &s).unwrap().report.costs);
    }
    let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&costs[0]), bits(&costs[1]));
}

#[test]
fn weightless_standing_needs_no_input() {
    let mut setup = PlanarSetup::default();
    setup.params.gravity = 0.0;
    setup.weights.state = vec![0.0; STATE_DIM];
    setup.weights.terminal = vec![0.0; STATE_DIM];
    let schedule = ModeSchedule::new(vec![0.0, 0.4], vec![0]).unwrap();
    let problem = setup.build(&schedule, setup.params.standing_state(0.0)).unwrap();
    let zero = LinearFeedbackPolicy::zero(problem.schedule(), STATE_DIM, INPUT_DIM);
    let out = solve(&problem, zero, &settings(false)).unwrap();
    assert!(out.report.final_cost().abs() < 1e-12);
    assert!(out.trajectory.nodes().all(|(_, _, u)| u.amax() < 1e-9));
    let x0: &Vector = problem.x0();
    assert!((out.trajectory.final_state() - x0).amax() < 1e-9);
}
