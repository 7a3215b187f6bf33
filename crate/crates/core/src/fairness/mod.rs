//! Equalized-odds (ε-DEO) and differential-fairness (ε-DF) measures.
//!
//! The hard measures work on integer (group, y, ŷ) tallies and match the
//! definition exactly, including an infinite ε when one group never receives
//! a prediction another group does. The soft measure runs on exponentially
//! smoothed expected counts with a Dirichlet prior so it stays finite and
//! differentiable during training.

mod counts;
mod soft;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskKind;
use crate::diffmath::Expr;

pub use counts::{
    epsilon_deo, epsilon_deo_per_slot, epsilon_df, epsilon_df_per_slot, hard_counts, slot_epsilon_deo, slot_epsilon_df,
    CountTable, GroupCellCounts,
};
pub use soft::{epsilon_deo_soft, soft_expected_counts, update_smoothed, SmoothedCounts, SmoothedExpr, SoftCounts};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FairnessError {
    #[error("count shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (TaskKind, usize),
        found: (TaskKind, usize),
    },
    #[error("expected {expected} label slots, found {found}")]
    SlotCount { expected: usize, found: usize },
    #[error("smoothed counts must be finite and non-negative")]
    BadValues,
    #[error("invalid fairness config: {0}")]
    Config(String),
}

/// Hyperparameters of the hinge fairness penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FairnessConfig {
    /// Penalty weight λ.
    pub lambda: f64,
    /// Target ε_t below which the penalty is inactive.
    pub target: f64,
    /// Smoothing rate ρ.
    pub rho: f64,
    /// Fraction of training steps with the penalty switched off.
    pub burn_in: f64,
    /// Dirichlet prior concentration for the soft probabilities.
    pub alpha: f64,
    pub min_support: f64,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            target: 0.0,
            rho: 0.1,
            burn_in: 0.0,
            alpha: 0.5,
            min_support: 1.0,
        }
    }
}

impl FairnessConfig {
    pub fn validate(&self) -> Result<(), FairnessError> {
        let bad = |m: &str| Err(FairnessError::Config(m.to_string()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.target >= 0.0) {
            return bad("target must be >= 0");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.burn_in) {
            return bad("burn_in must lie in [0, 1]");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.min_support >= 0.0) {
            return bad("min_support must be >= 0");
        }
        Ok(())
    }
}

/// λ · max(0, ε − ε_t).
pub fn fairness_penalty(epsilon: &Expr, config: &FairnessConfig) -> Expr {
    epsilon
        .sub(&Expr::scalar(config.target))
        .clamp_min(0.0)
        .scale(config.lambda)
}
