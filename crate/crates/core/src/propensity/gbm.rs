//! Boosted Bernoulli trees with balance-based selection of the tree count.
//!
//! Training runs to `max_trees`; the number of trees actually used is then
//! chosen to minimize the largest marginal KS statistic of the weighted
//! respondents against the reference sample. Candidates are every
//! [`BALANCE_GRID_STEP`] trees, then every 10 around the best grid point,
//! then every tree around the best of those. Ties go to the smaller count.

use std::fmt::Write as _;

use super::tree::{grow_tree, SortedColumns, Tree, MAX_TREE_DEPTH};
use super::{check_classes, expit_clamped, FitDiagnostics, PropensityFit, PsMethod};
use crate::error::{Error, Result};
use crate::linear_models::CovariateSet;
use crate::weighting::{BalanceEvaluator, BalanceSpec};

pub const BALANCE_GRID_STEP: usize = 100;
const REFINE_STEP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GbmProfile {
    /// 10000 trees at shrinkage 0.005.
    Full,
    /// 3000 trees at shrinkage 0.01.
    Desk,
}

impl GbmProfile {
    pub fn id(&self) -> &'static str {
        match self {
            GbmProfile::Full => "full",
            GbmProfile::Desk => "desk",
        }
    }

    pub fn params(&self) -> GbmParams {
        match self {
            GbmProfile::Full => GbmParams {
                max_trees: 10_000,
                shrinkage: 0.005,
                ..GbmParams::default()
            },
            GbmProfile::Desk => GbmParams {
                max_trees: 3000,
                shrinkage: 0.01,
                ..GbmParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbmParams {
    pub max_trees: usize,
    pub shrinkage: f64,
    pub max_depth: usize,
    /// Minimum number of rows in every leaf.
    pub min_node_size: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self {
            max_trees: 10_000,
            shrinkage: 0.005,
            max_depth: 3,
            min_node_size: 10,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "shrinkage must be in (0, 1], got {}",
                self.shrinkage
            )));
        }
        if self.max_depth == 0 || self.max_depth > MAX_TREE_DEPTH {
            return Err(Error::InvalidInput(format!(
                "tree depth must be in 1..={MAX_TREE_DEPTH}, got {}",
                self.max_depth
            )));
        }
        if self.min_node_size == 0 {
            return Err(Error::InvalidInput(
                "minimum node size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `baseline + shrinkage * sum of tree outputs`, on the log-odds scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostedModel {
    pub baseline: f64,
    pub trees: Vec<Tree>,
    pub shrinkage: f64,
    pub covariate_labels: Vec<String>,
}

impl BoostedModel {
    /// Log-odds using the first `k` trees, accumulated tree by tree.
    pub fn scores(&self, covariates: &[[f64; 4]], k: usize) -> Result<Vec<f64>> {
        if k > self.trees.len() {
            return Err(Error::TreeIndexOutOfRange {
                requested: k,
                available: self.trees.len(),
            });
        }
        let mut scores = vec![self.baseline; covariates.len()];
        for tree in &self.trees[..k] {
            for (s, row) in scores.iter_mut().zip(covariates) {
                *s += self.shrinkage * tree.predict(row);
            }
        }
        Ok(scores)
    }

    /// Plain-text dump for diffing against other implementations.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "baseline {:e}", self.baseline);
        let _ = writeln!(out, "shrinkage {:e}", self.shrinkage);
        let _ = writeln!(out, "covariates {}", self.covariate_labels.join(" "));
        let _ = writeln!(out, "trees {}", self.trees.len());
        for (j, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(out, "tree {j}");
            tree.dump_into(&mut out);
        }
        out
    }
}

pub fn gbm_predict(model: &BoostedModel, covariates: &[[f64; 4]], k: usize) -> Result<Vec<f64>> {
    Ok(model
        .scores(covariates, k)?
        .into_iter()
        .map(expit_clamped)
        .collect())
}

/// Mean Bernoulli deviance `-2/n * sum log p(t | score)`.
pub fn bernoulli_deviance(t: &[bool], scores: &[f64]) -> f64 {
    let total: f64 = t
        .iter()
        .zip(scores)
        .map(|(&t, &s)| {
            // log(1 + e^{-s}) for t = 1, log(1 + e^{s}) for t = 0, stably.
            let m = if t { -s } else { s };
            m.max(0.0) + (-m.abs()).exp().ln_1p()
        })
        .sum();
    2.0 * total / t.len() as f64
}

/// Evaluated `(trees, max KS)` pairs from a selection run, in evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceTrace {
    pub evaluated: Vec<(usize, f64)>,
    pub chosen: usize,
    pub chosen_ks: f64,
}

/// A trained model plus the training-set score trajectory, so any tree count
/// can be scored cheaply during balance selection.
#[derive(Debug, Clone)]
pub struct BoostingPath {
    pub model: BoostedModel,
    covariates: Vec<[f64; 4]>,
    covariate_set: Option<CovariateSet>,
    t: Vec<bool>,
    /// Training scores after `BALANCE_GRID_STEP * i` trees.
    snapshots: Vec<Vec<f64>>,
    /// Leaf node reached by each training row, per tree.
    leaves: Vec<Vec<u8>>,
}

impl BoostingPath {
    pub fn train(
        covariates: &[[f64; 4]],
        t: &[bool],
        params: &GbmParams,
        covariate_set: Option<CovariateSet>,
    ) -> Result<Self> {
        params.validate()?;
        if covariates.len() != t.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows for {} units",
                covariates.len(),
                t.len()
            )));
        }
        if covariates.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates must be finite".into()));
        }
        let responders = check_classes(t)?;
        let n = t.len();
        let p_bar = responders as f64 / n as f64;
        let baseline = (p_bar / (1.0 - p_bar)).ln();
        let target: Vec<f64> = t.iter().map(|&v| f64::from(u8::from(v))).collect();

        let mut data = SortedColumns::new(covariates);
        let mut scores = vec![baseline; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut trees = Vec::with_capacity(params.max_trees);
        let mut leaves = Vec::with_capacity(params.max_trees);
        let mut snapshots = vec![scores.clone()];

        for m in 0..params.max_trees {
            for i in 0..n {
                let p = expit_clamped(scores[i]);
                grad[i] = target[i] - p;
                hess[i] = p * (1.0 - p);
            }
            let mut node_of = vec![0u8; n];
            let tree = grow_tree(
                &mut data,
                &grad,
                &hess,
                params.max_depth,
                params.min_node_size,
                &mut node_of,
            );
            for (s, &leaf) in scores.iter_mut().zip(&node_of) {
                *s += params.shrinkage * tree.node_value(leaf as usize);
            }
            trees.push(tree);
            leaves.push(node_of);
            if (m + 1) % BALANCE_GRID_STEP == 0 {
                snapshots.push(scores.clone());
            }
        }

        let labels = match covariate_set {
            Some(cs) => cs.labels().iter().map(|s| s.to_string()).collect(),
            None => (1..=4).map(|j| format!("v{j}")).collect(),
        };
        Ok(Self {
            model: BoostedModel {
                baseline,
                trees,
                shrinkage: params.shrinkage,
                covariate_labels: labels,
            },
            covariates: covariates.to_vec(),
            covariate_set,
            t: t.to_vec(),
            snapshots,
            leaves,
        })
    }

    pub fn max_trees(&self) -> usize {
        self.model.trees.len()
    }

    /// Training log-odds after `k` trees; bit-identical to
    /// `model.scores(training covariates, k)`.
    pub fn scores_at(&self, k: usize) -> Result<Vec<f64>> {
        if k > self.max_trees() {
            return Err(Error::TreeIndexOutOfRange {
                requested: k,
                available: self.max_trees(),
            });
        }
        let base = k / BALANCE_GRID_STEP;
        let mut scores = self.snapshots[base].clone();
        let shrinkage = self.model.shrinkage;
        for j in base * BALANCE_GRID_STEP..k {
            let tree = &self.model.trees[j];
            for (s, &leaf) in scores.iter_mut().zip(&self.leaves[j]) {
                *s += shrinkage * tree.node_value(leaf as usize);
            }
        }
        Ok(scores)
    }

    pub fn probabilities_at(&self, k: usize) -> Result<Vec<f64>> {
        Ok(self.scores_at(k)?.into_iter().map(expit_clamped).collect())
    }

    /// Picks the tree count with the best balance and returns its fit.
    pub fn select(&self, balance: BalanceSpec) -> Result<(PropensityFit, BalanceTrace)> {
        let eval = BalanceEvaluator::new(&self.covariates, &self.t, balance)?;
        let max = self.max_trees();
        let mut evaluated: Vec<(usize, f64)> = Vec::new();
        let ks_at = |k: usize, evaluated: &mut Vec<(usize, f64)>| -> Result<f64> {
            if let Some(&(_, v)) = evaluated.iter().find(|(kk, _)| *kk == k) {
                return Ok(v);
            }
            let v = eval.max_ks_from_propensity(&self.probabilities_at(k)?)?;
            evaluated.push((k, v));
            Ok(v)
        };
        let best_of = |evaluated: &[(usize, f64)]| {
            evaluated
                .iter()
                .copied()
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("at least one candidate")
        };

        let mut grid: Vec<usize> = (0..=max).step_by(BALANCE_GRID_STEP).collect();
        if *grid.last().unwrap() != max {
            grid.push(max);
        }
        for k in grid {
            ks_at(k, &mut evaluated)?;
        }
        for (step, radius) in [(REFINE_STEP, BALANCE_GRID_STEP), (1, REFINE_STEP)] {
            let (center, _) = best_of(&evaluated);
            let lo = center.saturating_sub(radius);
            let hi = (center + radius).min(max);
            for k in (lo..=hi).step_by(step) {
                ks_at(k, &mut evaluated)?;
            }
        }
        let (chosen, chosen_ks) = best_of(&evaluated);

        let pi_hat = self.probabilities_at(chosen)?;
        let fit = PropensityFit {
            pi_hat,
            method: PsMethod::Gbm,
            covariate_set: self.covariate_set,
            coefficients: Vec::new(),
            diagnostics: FitDiagnostics {
                converged: true,
                iterations: max,
                chosen_iterations: Some(chosen),
                achieved_max_ks: Some(chosen_ks),
                note: None,
            },
        };
        Ok((
            fit,
            BalanceTrace {
                evaluated,
                chosen,
                chosen_ks,
            },
        ))
    }
}

pub fn fit_gbm(
    covariates: &[[f64; 4]],
    t: &[bool],
    params: &GbmParams,
    balance: BalanceSpec,
    covariate_set: Option<CovariateSet>,
) -> Result<(BoostedModel, PropensityFit)> {
    let path = BoostingPath::train(covariates, t, params, covariate_set)?;
    let (fit, _) = path.select(balance)?;
    Ok((path.model, fit))
}
