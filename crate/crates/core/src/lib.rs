//! Effective loss landscapes of semi-gradient Q-learning.
//!
//! The crate builds the small MDPs used in the experiments, evaluates the
//! Bellman optimal loss together with its residual and semi-gradient force
//! fields, solves the two-dimensional Fokker-Planck equation driven by those
//! forces to obtain a stationary density and effective loss, and runs
//! residual-then-semi gradient descent schedules on linear and neural
//! Q-functions.
//!
//! Modules:
//! - [`envs`]: environments, embeddings and mini-batch samplers
//! - [`qlinear`]: the two-parameter linear Q-function and its analysis
//! - [`fpe`]: the steady-state Fokker-Planck solver and landscape grids
//! - [`nn`]: a small ReLU network with hand-written backpropagation
//! - [`dynamics`]: training schedules, trajectories and crossing analysis
//! - [`verify`]: numeric checks of the smoothness, alignment and solver invariants

pub mod dynamics;
pub mod envs;
mod error;
pub mod fpe;
pub mod nn;
pub mod qlinear;
pub mod verify;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Which gradient of the Bellman optimal loss drives an update.
///
/// `Semi` treats the bootstrapped target `r + γ max Q(s', ·)` as a constant;
/// `Residual` differentiates through it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    Semi,
    Residual,
}

impl GradMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradMode::Semi => "semi",
            GradMode::Residual => "residual",
        }
    }
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(GradMode::Semi),
            "residual" | "res" => Ok(GradMode::Residual),
            other => Err(Error::Parse(format!("unknown gradient method `{other}`"))),
        }
    }
}

/// Formats a float with 17 significant digits, the fixed format used by
/// every text export so reruns are byte-identical.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
