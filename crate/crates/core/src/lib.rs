#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod linalg;
pub mod lq;
pub mod lqr;
pub mod model;
pub mod models;
pub mod mpc;
pub mod ode;
pub mod policy;
pub mod riccati;
pub mod solver;

pub use error::{Error, Result};
