//! Built-in problems.

pub mod lti;
pub mod planar;

pub use lti::{make_lti_problem, AffineConstraint, AffineStateConstraint, LtiMpcModel, LtiSpec};
pub use planar::{
    make_planar_trot_problem, planar_initial_policy, swing_c, ContactMode, PlanarParams,
    PlanarSetup, PlanarTask, PlanarWeights, SwingProfile,
};
