//! JSON problem configuration shared by the command-line tool and tests.
//!
//! ```json
//! {
//!   "model": { "type": "planar", "num_phases": 4, "task": { "kind": "regulation", "x": 0.0 } },
//!   "gait": { "modes": [1, 2], "durations": [0.4, 0.4] },
//!   "solver": { "max_iterations": 30 },
//!   "closed_loop": { "duration": 3.0, "disturbances": [{ "time": 0.5, "index": 2, "delta": 0.5 }] }
//! }
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::BenchSettings;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::SwitchedProblem;
use crate::models::planar::{ContactMode, PlanarSetup, STATE_DIM};
use crate::models::{
    make_lti_problem, planar_initial_policy, AffineConstraint, AffineStateConstraint, LtiMpcModel,
    LtiSpec,
};
use crate::mpc::{ClosedLoopSettings, Disturbance, GaitPattern, MpcModel, MpcSettings};
use crate::policy::LinearFeedbackPolicy;
use crate::solver::SolverSettings;

/// Default planar gait: alternating single stance, 0.4 s per phase.
pub const DEFAULT_PHASE_DURATION: f64 = 0.4;

/// Dense matrix written as a list of rows.
pub type Rows = Vec<Vec<f64>>;

fn matrix(name: &str, rows: &Rows) -> Result<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{name}: rows have different lengths")));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub c: Rows,
    pub d: Rows,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateConstraintConfig {
    pub f: Rows,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiConfig {
    pub a: Rows,
    pub b: Rows,
    pub q: Rows,
    pub r: Rows,
    /// Zero when absent.
    #[serde(default)]
    pub q_final: Option<Rows>,
    pub x0: Vec<f64>,
    #[serde(default = "default_switching_times")]
    pub switching_times: Vec<f64>,
    /// Per mode; `null` leaves a mode unconstrained.
    #[serde(default)]
    pub constraints: Vec<Option<ConstraintConfig>>,
    #[serde(default)]
    pub state_constraints: Vec<Option<StateConstraintConfig>>,
}

fn default_switching_times() -> Vec<f64> {
    vec![0.0, 1.0]
}

impl LtiConfig {
    pub fn spec(&self) -> Result<LtiSpec> {
        let a = matrix("a", &self.a)?;
        let q_final = match &self.q_final {
            Some(m) => matrix("q_final", m)?,
            None => Matrix::zeros(a.nrows(), a.nrows()),
        };
        let mut spec = LtiSpec::new(
            a,
            matrix("b", &self.b)?,
            matrix("q", &self.q)?,
            matrix("r", &self.r)?,
            q_final,
            Vector::from_vec(self.x0.clone()),
        )
        .with_switching_times(self.switching_times.clone());
        for (mode, g) in self.constraints.iter().enumerate() {
            if let Some(g) = g {
                spec = spec.with_constraint(
                    mode,
                    AffineConstraint {
                        c: matrix("c", &g.c)?,
                        d: matrix("d", &g.d)?,
                        e: Vector::from_vec(g.e.clone()),
                    },
                );
            }
        }
        for (mode, g) in self.state_constraints.iter().enumerate() {
            if let Some(g) = g {
                spec = spec.with_state_constraint(
                    mode,
                    AffineStateConstraint {
                        f: matrix("f", &g.f)?,
                        h: Vector::from_vec(g.h.clone()),
                    },
                );
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarConfig {
    #[serde(flatten)]
    pub setup: PlanarSetup,
    /// Gait phases in the horizon of `solve`.
    #[serde(default = "default_num_phases")]
    pub num_phases: usize,
    /// Standing at the task reference when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

fn default_num_phases() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelConfig {
    Lti(LtiConfig),
    Planar(PlanarConfig),
}

/// State jump `x[index] += delta` at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    pub time: f64,
    pub index: usize,
    pub delta: f64,
}

impl std::str::FromStr for DisturbanceConfig {
    type Err = Error;

    /// `time:index:delta`, e.g. `0.5:2:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("disturbance '{s}' is not time:index:delta"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            time: parts[0].trim().parse().map_err(|_| bad())?,
            index: parts[1].trim().parse().map_err(|_| bad())?,
            delta: parts[2].trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopConfig {
    pub duration: f64,
    pub control_period: f64,
    pub mpc_period: Option<f64>,
    pub disturbances: Vec<DisturbanceConfig>,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        let d = ClosedLoopSettings::default();
        Self {
            duration: d.duration,
            control_period: d.control_period,
            mpc_period: d.mpc_period,
            disturbances: Vec::new(),
        }
    }
}

impl ClosedLoopConfig {
    pub fn settings(&self, state_dim: usize) -> Result<ClosedLoopSettings> {
        let disturbances = self
            .disturbances
            .iter()
            .map(|d| {
                if d.index >= state_dim {
                    return Err(Error::Config(format!(
                        "disturbance index {} exceeds the state dimension {state_dim}",
                        d.index
                    )));
                }
                let mut delta = Vector::zeros(state_dim);
                delta[d.index] = d.delta;
                Ok(Disturbance { time: d.time, delta })
            })
            .collect::<Result<Vec<_>>>()?;
        let settings = ClosedLoopSettings {
            duration: self.duration,
            control_period: self.control_period,
            mpc_period: self.mpc_period,
            disturbances,
        };
        settings.validate()?;
        Ok(settings)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub gait: Option<GaitPattern>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub mpc: MpcSettings,
    #[serde(default)]
    pub closed_loop: ClosedLoopConfig,
    #[serde(default)]
    pub bench: BenchSettings,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.gait()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The configured gait, or a default: planar trot, or a single LTI mode
    /// of the same length.
    pub fn gait(&self) -> Result<GaitPattern> {
        match (&self.gait, &self.model) {
            (Some(g), _) => {
                g.validate()?;
                Ok(g.clone())
            }
            (None, ModelConfig::Planar(_)) => GaitPattern::uniform(
                vec![ContactMode::Swing0.id(), ContactMode::Swing1.id()],
                DEFAULT_PHASE_DURATION,
            ),
            (None, ModelConfig::Lti(_)) => GaitPattern::uniform(vec![0], DEFAULT_PHASE_DURATION),
        }
    }

    pub fn initial_state(&self) -> Result<Vector> {
        match &self.model {
            ModelConfig::Lti(c) => Ok(Vector::from_vec(c.x0.clone())),
            ModelConfig::Planar(c) => match &c.x0 {
                Some(x) if x.len() != STATE_DIM => Err(Error::Config(format!(
                    "planar x0 needs {STATE_DIM} entries"
                ))),
                Some(x) => Ok(Vector::from_vec(x.clone())),
                None => Ok(c.setup.params.standing_state(c.setup.task.com_reference(0.0))),
            },
        }
    }

    /// Fixed-horizon problem and starting policy for `solve`.
    pub fn problem(&self) -> Result<(SwitchedProblem, LinearFeedbackPolicy)> {
        match &self.model {
            ModelConfig::Lti(c) => {
                let problem = make_lti_problem(&c.spec()?)?;
                let policy =
                    LinearFeedbackPolicy::zero(problem.schedule(), problem.state_dim(), problem.input_dim());
                Ok((problem, policy))
            }
            ModelConfig::Planar(c) => {
                let gait = self.gait()?;
                let schedule = gait.schedule(0.0, 0, c.num_phases)?;
                let contacts = schedule
                    .subsystem_ids()
                    .iter()
                    .map(|&id| ContactMode::from_id(id))
                    .collect::<Result<Vec<_>>>()?;
                let problem = c.setup.build(&schedule, self.initial_state()?)?;
                let policy = planar_initial_policy(&problem, &c.setup, &contacts, 0.02);
                Ok((problem, policy))
            }
        }
    }

    /// Model driven by the MPC loop. LTI constraints and terminal weights
    /// are not used there: the horizon ends in the LQR cost-to-go.
    pub fn mpc_model(&self) -> Result<Arc<dyn MpcModel>> {
        match &self.model {
            ModelConfig::Lti(c) => {
                let spec = c.spec()?;
                Ok(Arc::new(LtiMpcModel {
                    a: spec.a,
                    b: spec.b,
                    q: spec.q,
                    r: spec.r,
                }))
            }
            ModelConfig::Planar(c) => {
                c.setup.validate()?;
                Ok(Arc::new(c.setup.clone()))
            }
        }
    }

    pub fn planar_setup(&self) -> Option<&PlanarSetup> {
        match &self.model {
            ModelConfig::Planar(c) => Some(&c.setup),
            ModelConfig::Lti(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::planar::PlanarTask;

    #[test]
    fn lti_config_round_trip() {
        let text = r#"{
            "model": {
                "type": "lti",
                "a": [[0, 1], [0, 0]], "b": [[0], [1]],
                "q": [[1, 0], [0, 1]], "r": [[1]],
                "x0": [1, 0],
                "switching_times": [0, 0.5, 1],
                "constraints": [null, { "c": [[0, 0]], "d": [[1]], "e": [0] }]
            },
            "solver": { "max_iterations": 7 }
        }"#;
        let config = Config::from_json(text).unwrap();
        assert_eq!(config.solver.max_iterations, 7);
        assert_eq!(config.solver.line_search_alphas.len(), 5);
        let (problem, policy) = config.problem().unwrap();
        assert_eq!(problem.num_modes(), 2);
        assert_eq!(policy.num_segments(), 2);
        let back = serde_json::to_string(&config).unwrap();
        assert_eq!(Config::from_json(&back).unwrap(), config);
    }

    #[test]
    fn planar_defaults_and_task() {
        let text = r#"{ "model": { "type": "planar", "task": { "kind": "regulation", "x": 0.2 } } }"#;
        let config = Config::from_json(text).unwrap();
        let setup = config.planar_setup().unwrap();
        assert_eq!(setup.task, PlanarTask::Regulation { x: 0.2 });
        assert_eq!(setup.params, Default::default());
        assert_eq!(config.gait().unwrap().modes, vec![1, 2]);
        assert_eq!(config.initial_state().unwrap()[0], 0.2);
        let (problem, _) = config.problem().unwrap();
        assert_eq!(problem.num_modes(), 4);
    }

    #[test]
    fn malformed_inputs_are_config_errors() {
        assert!(matches!(Config::from_json("{ nope"), Err(Error::Config(_))));
        assert!(matches!(
            Config::from_json(r#"{ "model": { "type": "cube" } }"#),
            Err(Error::Config(_))
        ));
        let ragged = r#"{ "model": { "type": "lti", "a": [[0, 1], [0]], "b": [[0], [1]],
            "q": [[1, 0], [0, 1]], "r": [[1]], "x0": [1, 0] } }"#;
        assert!(Config::from_json(ragged).unwrap().problem().is_err());
    }

    #[test]
    fn disturbance_strings() {
        let d: DisturbanceConfig = "0.5:2:-0.25".parse().unwrap();
        assert_eq!(d, DisturbanceConfig { time: 0.5, index: 2, delta: -0.25 });
        assert!("0.5:2".parse::<DisturbanceConfig>().is_err());
        let settings = ClosedLoopConfig {
            disturbances: vec![d],
            ..Default::default()
        }
        .settings(4)
        .unwrap();
        assert_eq!(settings.disturbances[0].delta.as_slice(), &[0.0, 0.0, -0.25, 0.0]);
    }
}
