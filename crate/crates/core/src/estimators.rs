//! Estimators of the population mean of `y` from respondents only.
//!
//! The design-level functions (`ols_mean`, `ipw_mean`, `bc_mean`,
//! `wls_mean`) work on plain slices and designs; the `est_*` wrappers build
//! the designs from a [`Dataset`] and attach weight diagnostics.

use std::fmt;

use crate::dgp::Dataset;
use crate::error::{Error, Result};
use crate::linear_models::{
    build_design, fit_least_squares, predict, CovariateSet, DesignMatrix, LinearFit, RowSelection,
    Weights,
};
use crate::propensity::PsMethod;
use crate::weighting::{check_propensities, compute_weights, effective_sample_size, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Ols,
    Ipw,
    Bc,
    Wls,
}

impl Family {
    pub fn id(&self) -> &'static str {
        match self {
            Family::Ols => "ols",
            Family::Ipw => "ipw",
            Family::Bc => "bc",
            Family::Wls => "wls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EstimatorSpec {
    pub family: Family,
    pub ps_method: Option<PsMethod>,
    pub ps_covariates: Option<CovariateSet>,
    pub scheme: Option<Scheme>,
    pub y_covariates: Option<CovariateSet>,
    pub y_interaction: bool,
    pub ipw_normalized: bool,
}

impl EstimatorSpec {
    pub fn ols(y_covariates: CovariateSet, y_interaction: bool) -> Self {
        Self {
            family: Family::Ols,
            ps_method: None,
            ps_covariates: None,
            scheme: None,
            y_covariates: Some(y_covariates),
            y_interaction,
            ipw_normalized: false,
        }
    }

    pub fn ipw(
        method: PsMethod,
        ps_covariates: CovariateSet,
        scheme: Scheme,
        normalized: bool,
    ) -> Self {
        Self {
            family: Family::Ipw,
            ps_method: Some(method),
            ps_covariates: Some(ps_covariates),
            scheme: Some(scheme),
            y_covariates: None,
            y_interaction: false,
            ipw_normalized: normalized,
        }
    }

    /// `family` must be `Bc` or `Wls`.
    pub fn doubly_robust(
        family: Family,
        method: PsMethod,
        ps_covariates: CovariateSet,
        y_covariates: CovariateSet,
        y_interaction: bool,
    ) -> Self {
        Self {
            family,
            ps_method: Some(method),
            ps_covariates: Some(ps_covariates),
            scheme: None,
            y_covariates: Some(y_covariates),
            y_interaction,
            ipw_normalized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let has_ps = self.ps_method.is_some() && self.ps_covariates.is_some();
        let no_ps = self.ps_method.is_none() && self.ps_covariates.is_none();
        let has_y = self.y_covariates.is_some();
        let ok = match self.family {
            Family::Ols => no_ps && self.scheme.is_none() && has_y,
            Family::Ipw => has_ps && self.scheme.is_some() && !has_y && !self.y_interaction,
            Family::Bc | Family::Wls => has_ps && self.scheme.is_none() && has_y,
        };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "inconsistent estimator spec: {self:?}"
            )));
        }
        if self.y_interaction && self.y_covariates == Some(CovariateSet::X) {
            return Err(Error::InvalidInput(
                "interaction column is only defined for the Z covariates".into(),
            ));
        }
        Ok(())
    }

    /// `<ps_method>:<ps_covs>:<scheme_or_family>`, with `none` for absent parts.
    pub fn id(&self) -> String {
        let method = self.ps_method.map_or("none", |m| m.id());
        let covs = self.ps_covariates.map_or("none", |c| c.id());
        let last = match (self.family, self.scheme) {
            (Family::Ipw, Some(s)) => format!("ipw-{}", s.id()),
            (f, _) => f.id().to_string(),
        };
        format!("{method}:{covs}:{last}")
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimateDiagnostics {
    /// Largest respondent weight, for estimators that weight.
    pub max_weight: Option<f64>,
    pub ess: Option<f64>,
    pub ps_converged: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub diagnostics: EstimateDiagnostics,
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} estimate is {value}")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_lengths(n: usize, others: &[(&str, usize)]) -> Result<()> {
    for &(name, len) in others {
        if len != n {
            return Err(Error::DimensionMismatch(format!(
                "{name} has length {len}, expected {n}"
            )));
        }
    }
    Ok(())
}

/// Fits on the respondent design and averages predictions over `full`.
pub fn ols_mean(respondents: &DesignMatrix, y_resp: &[f64], full: &DesignMatrix) -> Result<f64> {
    let fit = fit_least_squares(respondents, y_resp, Weights::Uniform)?;
    finite(mean(&predict(&fit, full)?), "OLS")
}

/// Weighted version of [`ols_mean`]; `w_resp` aligns with the respondent rows.
pub fn wls_mean(
    respondents: &DesignMatrix,
    y_resp: &[f64],
    w_resp: &[f64],
    full: &DesignMatrix,
) -> Result<f64> {
    let fit = fit_least_squares(respondents, y_resp, Weights::Supplied(w_resp))?;
    finite(mean(&predict(&fit, full)?), "WLS")
}

/// IPW mean over all units; `y` is read only where `t` is set.
pub fn ipw_mean(
    y: &[f64],
    t: &[bool],
    pi_hat: &[f64],
    scheme: Scheme,
    normalized: bool,
) -> Result<f64> {
    let n = t.len();
    check_lengths(n, &[("y", y.len()), ("pi_hat", pi_hat.len())])?;
    check_propensities(pi_hat)?;
    let resp = || (0..n).filter(|&i| t[i]);
    let n1 = resp().count();
    if n1 == 0 {
        return Err(Error::ZeroWeight("no respondents".into()));
    }
    let value = match scheme {
        Scheme::Pop => {
            let num: f64 = resp().map(|i| y[i] / pi_hat[i]).sum();
            if normalized {
                let den: f64 = resp().map(|i| 1.0 / pi_hat[i]).sum();
                num / den
            } else {
                num / n as f64
            }
        }
        Scheme::Nr => {
            let n0 = n - n1;
            let y1 = resp().map(|i| y[i]).sum::<f64>() / n1 as f64;
            if n0 == 0 {
                y1
            } else {
                let w = |i: usize| (1.0 - pi_hat[i]) / pi_hat[i];
                let den: f64 = resp().map(w).sum();
                if den <= 0.0 {
                    return Err(Error::ZeroWeight(
                        "nonrespondent weights sum to zero".into(),
                    ));
                }
                let mu0 = resp().map(|i| y[i] * w(i)).sum::<f64>() / den;
                (n1 as f64 * y1 + n0 as f64 * mu0) / n as f64
            }
        }
    };
    finite(value, "IPW")
}

/// `(1/n) sum [m + t (y - m) / pi]`.
pub fn bc_mean(y: &[f64], t: &[bool], pi_hat: &[f64], m_hat: &[f64]) -> Result<f64> {
    let n = t.len();
    check_lengths(
        n,
        &[
            ("y", y.len()),
            ("pi_hat", pi_hat.len()),
            ("m_hat", m_hat.len()),
        ],
    )?;
    check_propensities(pi_hat)?;
    let total: f64 = (0..n)
        .map(|i| {
            if t[i] {
                m_hat[i] + (y[i] - m_hat[i]) / pi_hat[i]
            } else {
                m_hat[i]
            }
        })
        .sum();
    finite(total / n as f64, "BC")
}

fn weight_diagnostics(pi_hat: &[f64], t: &[bool], scheme: Scheme) -> Result<EstimateDiagnostics> {
    let w = compute_weights(pi_hat, t, scheme)?;
    Ok(EstimateDiagnostics {
        max_weight: Some(w.max_weight()),
        ess: Some(effective_sample_size(w.as_slice())),
        ps_converged: None,
    })
}

fn respondent_values(v: &[f64], t: &[bool]) -> Vec<f64> {
    v.iter()
        .zip(t)
        .filter_map(|(&v, &t)| t.then_some(v))
        .collect()
}

pub fn est_ols_mean(
    ds: &Dataset,
    y_covariates: CovariateSet,
    y_interaction: bool,
) -> Result<Estimate> {
    let resp = build_design(ds, y_covariates, y_interaction, RowSelection::Respondents)?;
    let full = build_design(ds, y_covariates, y_interaction, RowSelection::All)?;
    Ok(Estimate {
        value: ols_mean(&resp, &ds.respondent_y(), &full)?,
        diagnostics: EstimateDiagnostics::default(),
    })
}

pub fn est_ipw(ds: &Dataset, pi_hat: &[f64], scheme: Scheme, normalized: bool) -> Result<Estimate> {
    Ok(Estimate {
        value: ipw_mean(&ds.y, &ds.t, pi_hat, scheme, normalized)?,
        diagnostics: weight_diagnostics(pi_hat, &ds.t, scheme)?,
    })
}

/// Bias-corrected estimator with `m_hat` from `y_fit` evaluated on `full_design`.
pub fn est_bc(
    ds: &Dataset,
    pi_hat: &[f64],
    y_fit: &LinearFit,
    full_design: &DesignMatrix,
) -> Result<Estimate> {
    let m_hat = predict(y_fit, full_design)?;
    Ok(Estimate {
        value: bc_mean(&ds.y, &ds.t, pi_hat, &m_hat)?,
        diagnostics: weight_diagnostics(pi_hat, &ds.t, Scheme::Pop)?,
    })
}

/// Outcome regression on respondents weighted by `1/pi_hat`.
pub fn est_dr_wls(
    ds: &Dataset,
    pi_hat: &[f64],
    y_covariates: CovariateSet,
    y_interaction: bool,
) -> Result<Estimate> {
    check_lengths(ds.n(), &[("pi_hat", pi_hat.len())])?;
    check_propensities(pi_hat)?;
    let resp = build_design(ds, y_covariates, y_interaction, RowSelection::Respondents)?;
    let full = build_design(ds, y_covariates, y_interaction, RowSelection::All)?;
    let w: Vec<f64> = respondent_values(pi_hat, &ds.t)
        .iter()
        .map(|p| 1.0 / p)
        .collect();
    Ok(Estimate {
        value: wls_mean(&resp, &ds.respondent_y(), &w, &full)?,
        diagnostics: weight_diagnostics(pi_hat, &ds.t, Scheme::Pop)?,
    })
}

/// Plain OLS outcome fit on respondents plus the all-unit design, as used by BC.
pub fn outcome_fit(
    ds: &Dataset,
    y_covariates: CovariateSet,
    y_interaction: bool,
) -> Result<(LinearFit, DesignMatrix)> {
    let resp = build_design(ds, y_covariates, y_interaction, RowSelection::Respondents)?;
    let full = build_design(ds, y_covariates, y_interaction, RowSelection::All)?;
    Ok((
        fit_least_squares(&resp, &ds.respondent_y(), Weights::Uniform)?,
        full,
    ))
}

/// Evaluates `spec` on `ds`. `pi_hat` is required for every family but OLS.
pub fn evaluate(spec: &EstimatorSpec, ds: &Dataset, pi_hat: Option<&[f64]>) -> Result<Estimate> {
    spec.validate()?;
    let need_pi =
        || pi_hat.ok_or_else(|| Error::InvalidInput(format!("{spec} needs propensities")));
    let y_covs = || spec.y_covariates.expect("validated");
    match spec.family {
        Family::Ols => est_ols_mean(ds, y_covs(), spec.y_interaction),
        Family::Ipw => est_ipw(
            ds,
            need_pi()?,
            spec.scheme.expect("validated"),
            spec.ipw_normalized,
        ),
        Family::Bc => {
            let (fit, full) = outcome_fit(ds, y_covs(), spec.y_interaction)?;
            est_bc(ds, need_pi()?, &fit, &full)
        }
        Family::Wls => est_dr_wls(ds, need_pi()?, y_covs(), spec.y_interaction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_design(zs: &[f64]) -> DesignMatrix {
        let rows: Vec<Vec<f64>> = zs.iter().map(|&z| vec![1.0, z]).collect();
        DesignMatrix::from_rows(vec!["1".into(), "z".into()], &rows).unwrap()
    }

    #[test]
    fn ols_line_through_two_respondents() {
        let m = ols_mean(
            &line_design(&[0.0, 1.0]),
            &[1.0, 3.0],
            &line_design(&[0.0, 1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert!((m - 4.0).abs() < 1e-12);
    }

    #[test]
    fn wls_two_points_ignores_weights() {
        let m = wls_mean(
            &line_design(&[0.0, 1.0]),
            &[0.0, 1.0],
            &[2.0, 4.0],
            &line_design(&[0.0, 1.0, 2.0]),
        )
        .unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ipw_hand_examples() {
        let y = [10.0, 20.0, f64::NAN];
        let t = [true, true, false];
        let pi = [0.5, 0.8, 0.3];
        assert!((ipw_mean(&y, &t, &pi, Scheme::Pop, false).unwrap() - 15.0).abs() < 1e-12);
        assert!((ipw_mean(&y, &t, &pi, Scheme::Pop, true).unwrap() - 45.0 / 3.25).abs() < 1e-12);
        assert!((ipw_mean(&y, &t, &pi, Scheme::Nr, true).unwrap() - 14.0).abs() < 1e-12);
    }

    #[test]
    fn ipw_full_response_near_one_gives_mean() {
        let y = [1.0, 2.0, 6.0];
        let t = [true; 3];
        let pi = [1.0 - 1e-15; 3];
        for scheme in [Scheme::Pop, Scheme::Nr] {
            for norm in [false, true] {
                assert!((ipw_mean(&y, &t, &pi, scheme, norm).unwrap() - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bc_hand_example() {
        let v = bc_mean(
            &[10.0, 20.0],
            &[true, true],
            &[0.5, 1.0 - 1e-16],
            &[0.0, 0.0],
        )
        .unwrap();
        assert!((v - 20.0).abs() < 1e-12);
    }

    #[test]
    fn bc_with_zero_outcome_model_is_unnormalized_ipw() {
        let y = [3.0, -1.0, 7.5, 2.0];
        let t = [true, false, true, true];
        let pi = [0.2, 0.6, 0.9, 0.35];
        let bc = bc_mean(&y, &t, &pi, &[0.0; 4]).unwrap();
        let ipw = ipw_mean(&y, &t, &pi, Scheme::Pop, false).unwrap();
        assert!((bc - ipw).abs() < 1e-12);
    }

    #[test]
    fn propensity_outside_open_interval_rejected() {
        assert!(matches!(
            ipw_mean(&[1.0], &[true], &[1.0], Scheme::Pop, true),
            Err(Error::PropensityOutOfRange { unit: 0, .. })
        ));
        assert!(bc_mean(&[1.0], &[true], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let r = ipw_mean(
            &[f64::INFINITY, 1.0],
            &[true, true],
            &[0.5, 0.5],
            Scheme::Pop,
            true,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn spec_ids_and_validation() {
        let s = EstimatorSpec::ipw(PsMethod::Logistic, CovariateSet::Z, Scheme::Pop, true);
        assert_eq!(s.id(), "logistic:z:ipw-pop");
        assert_eq!(
            EstimatorSpec::ols(CovariateSet::X, false).id(),
            "none:none:ols"
        );
        let w = EstimatorSpec::doubly_robust(
            Family::Wls,
            PsMethod::Gbm,
            CovariateSet::X,
            CovariateSet::Z,
            true,
        );
        assert_eq!(w.id(), "gbm:x:wls");
        assert!(w.validate().is_ok());
        let mut bad = s;
        bad.y_covariates = Some(CovariateSet::Z);
        assert!(bad.validate().is_err());
        assert!(EstimatorSpec::ols(CovariateSet::X, true)
            .validate()
            .is_err());
    }
}
