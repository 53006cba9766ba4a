//! Regularized estimation of the effect of an endogenous treatment with many
//! instruments, some irrelevant and some invalid.

pub mod cli;
pub mod data;
pub mod elasticnet;
pub mod error;
pub mod estimator;
pub mod grouplasso;
pub mod ic;
pub mod linalg;
pub mod simulation;
pub mod splines;

use serde::{Deserialize, Serialize};

pub use error::{R2iveError, Result};

/// Stopping rule for the coordinate-descent solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop once a full pass changes no coefficient by more than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
        }
    }
}
