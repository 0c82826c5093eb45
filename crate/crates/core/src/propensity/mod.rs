//! Response-probability (propensity score) models.
//!
//! Three fitters share one output type: logistic regression by IRLS,
//! robit(1) regression (Cauchy link) by damped Fisher scoring, and a
//! boosted tree model whose number of trees is chosen to minimize the worst
//! marginal KS imbalance of the implied weights.

use std::fmt;

use crate::dgp::expit;
use crate::error::{Error, Result};
use crate::linear_models::CovariateSet;

mod gbm;
mod logistic;
mod robit;
mod tree;

pub use gbm::{
    bernoulli_deviance, fit_gbm, gbm_predict, BalanceTrace, BoostedModel, BoostingPath, GbmParams,
    GbmProfile, BALANCE_GRID_STEP,
};
pub use logistic::{fit_logistic, fit_logistic_with, logistic_score, IrlsOptions, ETA_CAP};
pub use robit::{
    fit_robit1, fit_robit1_with, robit1_cdf, robit_gradient, robit_log_likelihood, RobitOptions,
};
pub use tree::{Node, Tree};

/// Probabilities produced by any link are kept inside `[P_MIN, 1 - P_MIN]`.
pub const P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PsMethod {
    Logistic,
    Robit1,
    Gbm,
}

impl PsMethod {
    pub fn id(&self) -> &'static str {
        match self {
            PsMethod::Logistic => "logistic",
            PsMethod::Robit1 => "robit",
            PsMethod::Gbm => "gbm",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s {
            "logistic" => Some(PsMethod::Logistic),
            "robit" => Some(PsMethod::Robit1),
            "gbm" => Some(PsMethod::Gbm),
            _ => None,
        }
    }
}

impl fmt::Display for PsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsMethod::Logistic => "Logistic",
            PsMethod::Robit1 => "Robit",
            PsMethod::Gbm => "GBM",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// GBM only.
    pub chosen_iterations: Option<usize>,
    /// GBM only.
    pub achieved_max_ks: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub pi_hat: Vec<f64>,
    pub method: PsMethod,
    pub covariate_set: Option<CovariateSet>,
    /// Regression coefficients (empty for GBM).
    pub coefficients: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

pub(crate) fn clamp_probability(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Logistic link with the probability clamp applied.
pub fn expit_clamped(eta: f64) -> f64 {
    clamp_probability(expit(eta))
}

pub(crate) fn check_classes(t: &[bool]) -> Result<usize> {
    let responders = t.iter().filter(|&&v| v).count();
    if responders == 0 || responders == t.len() {
        return Err(Error::SingleClass {
            responders,
            n: t.len(),
        });
    }
    Ok(responders)
}
