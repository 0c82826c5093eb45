//! Inverse-probability weights and covariate balance.

use std::fmt;

use crate::error::{Error, Result};

/// Which population the respondent weights are meant to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// Respondents weighted by `1/pi` to stand in for the whole sample.
    Pop,
    /// Respondents weighted by `(1-pi)/pi` to stand in for the nonrespondents.
    Nr,
}

impl Scheme {
    pub fn id(&self) -> &'static str {
        match self {
            Scheme::Pop => "pop",
            Scheme::Nr => "nr",
        }
    }

    fn weight(&self, pi: f64) -> f64 {
        match self {
            Scheme::Pop => 1.0 / pi,
            Scheme::Nr => (1.0 - pi) / pi,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Pop => "IPW-POP",
            Scheme::Nr => "IPW-NR",
        })
    }
}

/// Per-unit weights; nonrespondents carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    pub scheme: Scheme,
}

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Weights of the respondents, in unit order.
    pub fn respondent_weights(&self, t: &[bool]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(t)
            .filter_map(|(&w, &t)| t.then_some(w))
            .collect()
    }
}

pub(crate) fn check_propensities(pi_hat: &[f64]) -> Result<()> {
    match pi_hat
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > 0.0 && p < 1.0))
    {
        Some((unit, &value)) => Err(Error::PropensityOutOfRange { unit, value }),
        None => Ok(()),
    }
}

pub fn compute_weights(pi_hat: &[f64], t: &[bool], scheme: Scheme) -> Result<WeightVector> {
    if pi_hat.len() != t.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} propensities for {} units",
            pi_hat.len(),
            t.len()
        )));
    }
    check_propensities(pi_hat)?;
    if !t.iter().any(|&t| t) {
        return Err(Error::ZeroWeight("no respondents".into()));
    }
    let weights = pi_hat
        .iter()
        .zip(t)
        .map(|(&p, &t)| if t { scheme.weight(p) } else { 0.0 })
        .collect();
    Ok(WeightVector { weights, scheme })
}

/// Floors propensities at `1/cap`, which caps POP weights at `cap`.
pub fn apply_weight_cap(pi_hat: &[f64], cap: f64) -> Vec<f64> {
    let floor = 1.0 / cap;
    pi_hat.iter().map(|&p| p.max(floor)).collect()
}

/// `(sum w)^2 / sum w^2` over the positive weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let (s, s2) = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .fold((0.0, 0.0), |(s, s2), &w| (s + w, s2 + w * w));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

#[derive(Debug, Clone, Copy)]
struct PooledEntry {
    value: f64,
    in_a: bool,
    /// Position within its own sample.
    index: u32,
}

/// Sup of `|F_a - F_b|` over the pooled jump points. `pooled` is sorted by value.
fn sweep(pooled: &[PooledEntry], w_a: &[f64], w_b: &[f64], total_a: f64, total_b: f64) -> f64 {
    let mut cum_a = 0.0;
    let mut cum_b = 0.0;
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].value;
        while i < pooled.len() && pooled[i].value == v {
            let e = pooled[i];
            if e.in_a {
                cum_a += w_a[e.index as usize];
            } else {
                cum_b += w_b[e.index as usize];
            }
            i += 1;
        }
        best = best.max((cum_a / total_a - cum_b / total_b).abs());
    }
    best
}

fn sorted_pool(
    values_a: impl Iterator<Item = f64>,
    values_b: impl Iterator<Item = f64>,
) -> Vec<PooledEntry> {
    let mut pooled: Vec<PooledEntry> = values_a
        .enumerate()
        .map(|(i, value)| PooledEntry {
            value,
            in_a: true,
            index: i as u32,
        })
        .chain(values_b.enumerate().map(|(i, value)| PooledEntry {
            value,
            in_a: false,
            index: i as u32,
        }))
        .collect();
    pooled.sort_by(|x, y| x.value.total_cmp(&y.value));
    pooled
}

fn total_weight(w: &[f64], side: &str) -> Result<f64> {
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{side} weights must be finite and nonnegative"
        )));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight(format!("{side} sample")));
    }
    Ok(total)
}

/// Two-sample Kolmogorov–Smirnov distance between weight-normalized ECDFs.
pub fn weighted_ks(values_a: &[f64], w_a: &[f64], values_b: &[f64], w_b: &[f64]) -> Result<f64> {
    if values_a.len() != w_a.len() || values_b.len() != w_b.len() {
        return Err(Error::DimensionMismatch(
            "values and weights differ in length".into(),
        ));
    }
    if values_a.iter().chain(values_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("KS values must be finite".into()));
    }
    let total_a = total_weight(w_a, "first")?;
    let total_b = total_weight(w_b, "second")?;
    let pooled = sorted_pool(values_a.iter().copied(), values_b.iter().copied());
    Ok(sweep(&pooled, w_a, w_b, total_a, total_b))
}

/// Reference sample for balance checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BalanceReference {
    /// Full sample (POP) or nonrespondents (NR), unit weights.
    #[default]
    Default,
    /// Nonrespondents under both schemes; under POP they are weighted by
    /// `1/(1-pi)` so both sides target the full population.
    RespondentsVsNonrespondents,
}

impl BalanceReference {
    pub fn id(&self) -> &'static str {
        match self {
            BalanceReference::Default => "default",
            BalanceReference::RespondentsVsNonrespondents => "respondents_vs_nonrespondents",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BalanceSpec {
    pub scheme: Scheme,
    pub reference: BalanceReference,
}

impl BalanceSpec {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            reference: BalanceReference::Default,
        }
    }
}

/// Presorted balance computation for a fixed covariate matrix and response
/// pattern; only the weights change between calls.
#[derive(Debug, Clone)]
pub struct BalanceEvaluator {
    spec: BalanceSpec,
    respondents: Vec<usize>,
    reference: Vec<usize>,
    pools: Vec<Vec<PooledEntry>>,
}

impl BalanceEvaluator {
    pub fn new(covariates: &[[f64; 4]], t: &[bool], spec: BalanceSpec) -> Result<Self> {
        if covariates.len() != t.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows for {} units",
                covariates.len(),
                t.len()
            )));
        }
        let respondents: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
        let reference: Vec<usize> = match (spec.scheme, spec.reference) {
            (Scheme::Pop, BalanceReference::Default) => (0..t.len()).collect(),
            _ => (0..t.len()).filter(|&i| !t[i]).collect(),
        };
        if respondents.is_empty() || reference.is_empty() {
            return Err(Error::ZeroWeight(
                "balance needs respondents and a reference sample".into(),
            ));
        }
        let pools = (0..4)
            .map(|j| {
                sorted_pool(
                    respondents.iter().map(|&i| covariates[i][j]),
                    reference.iter().map(|&i| covariates[i][j]),
                )
            })
            .collect();
        Ok(Self {
            spec,
            respondents,
            reference,
            pools,
        })
    }

    pub fn spec(&self) -> BalanceSpec {
        self.spec
    }

    /// Max marginal KS for the scheme's weights computed from `pi_hat`.
    pub fn max_ks_from_propensity(&self, pi_hat: &[f64]) -> Result<f64> {
        check_propensities(pi_hat)?;
        let w_a: Vec<f64> = self
            .respondents
            .iter()
            .map(|&i| self.spec.scheme.weight(pi_hat[i]))
            .collect();
        let w_b: Vec<f64> = match (self.spec.scheme, self.spec.reference) {
            (Scheme::Pop, BalanceReference::RespondentsVsNonrespondents) => self
                .reference
                .iter()
                .map(|&i| 1.0 / (1.0 - pi_hat[i]))
                .collect(),
            _ => vec![1.0; self.reference.len()],
        };
        self.max_ks(&w_a, &w_b)
    }

    /// Max marginal KS for explicit respondent and reference weights.
    pub fn max_ks(&self, w_a: &[f64], w_b: &[f64]) -> Result<f64> {
        Ok(self
            .per_column_ks(w_a, w_b)?
            .into_iter()
            .fold(0.0, f64::max))
    }

    pub fn per_column_ks(&self, w_a: &[f64], w_b: &[f64]) -> Result<[f64; 4]> {
        if w_a.len() != self.respondents.len() || w_b.len() != self.reference.len() {
            return Err(Error::DimensionMismatch("balance weight lengths".into()));
        }
        let total_a = total_weight(w_a, "respondent")?;
        let total_b = total_weight(w_b, "reference")?;
        Ok(std::array::from_fn(|j| {
            sweep(&self.pools[j], w_a, w_b, total_a, total_b)
        }))
    }
}

/// Largest of the four marginal weighted KS statistics between weighted
/// respondents and the scheme's default reference sample (unit weights).
pub fn max_marginal_ks(covariates: &[[f64; 4]], t: &[bool], weights: &WeightVector) -> Result<f64> {
    if weights.len() != t.len() {
        return Err(Error::DimensionMismatch(
            "weights and response indicators".into(),
        ));
    }
    if weights
        .as_slice()
        .iter()
        .zip(t)
        .any(|(&w, &t)| !t && w != 0.0)
    {
        return Err(Error::InvalidInput(
            "nonrespondents must carry zero weight".into(),
        ));
    }
    let eval = BalanceEvaluator::new(covariates, t, BalanceSpec::new(weights.scheme))?;
    let w_a = weights.respondent_weights(t);
    let w_b = vec![1.0; eval.reference.len()];
    eval.max_ks(&w_a, &w_b)
}
