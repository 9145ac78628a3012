//! Robust reduced-order MPC: the optimal control problem solved by sequential
//! convex programming, the receding-horizon controller and closed-loop runs.

mod closed_loop;
mod controller;
mod ocp;
mod reference;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use closed_loop::{run_closed_loop, ClosedLoopOptions, ClosedLoopTrace, StepRecord, TraceRow, TraceSummary};
pub use controller::{Controller, ControllerState, StepOutcome, StepStatus};
pub use ocp::{build_subproblem, discretize, solve_ocp, Discretization, Iterate, Layout, OcpProblem, Subproblem, Target};
pub use reference::Reference;

use crate::error::{Error, Result};
use crate::tighten::InputBox;
use crate::tube::{InputNorm, TubeState};

/// Controller variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Tube-tightened constraints with terminal ingredients.
    RnRompc,
    /// Nominal predictions with soft output constraints.
    NominalSoft,
    /// Nominal predictions with soft constraints shrunk by a fixed buffer.
    BufferSoft,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::RnRompc => "rn-rompc",
            Scheme::NominalSoft => "nominal-soft",
            Scheme::BufferSoft => "buffer-soft",
        }
    }

    pub fn is_robust(self) -> bool {
        self == Scheme::RnRompc
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rn-rompc" => Ok(Scheme::RnRompc),
            "nominal-soft" => Ok(Scheme::NominalSoft),
            "buffer-soft" => Ok(Scheme::BufferSoft),
            other => Err(Error::Config(format!("unknown scheme '{other}' (expected rn-rompc, nominal-soft or buffer-soft)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    pub horizon: usize,
    pub dt: f64,
    #[serde(with = "crate::linalg::rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub r: DMatrix<f64>,
    pub input_box: InputBox,
    pub scheme: Scheme,
    /// Per-row constraint buffer for the buffer scheme.
    pub buffer: Vec<f64>,
    /// Weight per unit of constraint violation in the soft schemes.
    pub soft_penalty: f64,
    pub input_norm: InputNorm,
    /// Optimize the initial nominal state; otherwise it equals the measurement.
    pub free_initial_state: bool,
    pub max_scp_iters: usize,
    pub scp_tol: f64,
    /// Initial trust radius; `None` uses half the operating-ball radius.
    pub trust_radius: Option<f64>,
    pub trust_radius_min: f64,
    /// Bisection steps of the reference governor.
    pub governor_steps: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self::for_dims(4, 4)
    }
}

impl OcpConfig {
    /// Defaults for `n` reduced states and `m` inputs.
    pub fn for_dims(n: usize, m: usize) -> Self {
        Self {
            horizon: 3,
            dt: 0.02,
            q: DMatrix::identity(n, n) * 100.0,
            r: DMatrix::identity(m, m) * 1e-6,
            input_box: InputBox::uniform(m, 0.0, 2500.0),
            scheme: Scheme::RnRompc,
            buffer: Vec::new(),
            soft_penalty: 1e4,
            input_norm: InputNorm::OneNorm,
            free_initial_state: true,
            max_scp_iters: 20,
            scp_tol: 1e-6,
            trust_radius: None,
            trust_radius_min: 1e-4,
            governor_steps: 4,
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("horizon must be at least 1 and dt positive".into()));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(Error::Config(format!("cost weights must be {n}x{n} and {m}x{m}")));
        }
        for (name, w) in [("q", &self.q), ("r", &self.r)] {
            if (w - w.transpose()).amax() > 1e-12 * (1.0 + w.amax()) {
                return Err(Error::Config(format!("cost weight {name} must be symmetric")));
            }
            if w.clone().symmetric_eigenvalues().min() <= 0.0 {
                return Err(Error::Config(format!("cost weight {name} must be positive definite")));
            }
        }
        if self.input_box.lower.len() != m || self.input_box.upper.len() != m {
            return Err(Error::Config(format!("input box must have {m} entries")));
        }
        if self.input_box.lower.iter().zip(&self.input_box.upper).any(|(lo, hi)| lo > hi) {
            return Err(Error::Config("input box lower bound exceeds upper bound".into()));
        }
        if !(self.soft_penalty >= 0.0) || !(self.trust_radius_min > 0.0) || !(self.scp_tol > 0.0) {
            return Err(Error::Config("penalty, trust radius and tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcpStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

impl OcpStatus {
    pub fn name(self) -> &'static str {
        match self {
            OcpStatus::Optimal => "optimal",
            OcpStatus::MaxIters => "max-iters",
            OcpStatus::Infeasible => "infeasible",
        }
    }
}

/// Optimal input, nominal state and tube trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u_traj: Vec<DVector<f64>>,
    pub z_traj: Vec<DVector<f64>>,
    /// Tubes re-propagated with exact norms from the realized initial values.
    pub s_traj: Vec<f64>,
    pub delta_traj: Vec<f64>,
    pub cost: f64,
    pub status: OcpStatus,
    pub scp_iters: usize,
    /// Largest nonlinear dynamics defect.
    pub defect: f64,
    /// Largest tightened constraint value along the returned trajectories.
    pub max_constraint: f64,
}

impl OcpSolution {
    pub fn tube(&self, k: usize) -> TubeState {
        TubeState { s: self.s_traj[k], delta: self.delta_traj[k] }
    }
}
