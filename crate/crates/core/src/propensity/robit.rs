use std::f64::consts::PI;

use super::logistic::{fit_logistic_with, IrlsOptions};
use super::{check_classes, FitDiagnostics, PropensityFit, PsMethod, P_MIN};
use crate::error::{Error, Result};
use crate::linear_models::{dot, fit_least_squares, DesignMatrix, Weights};

#[derive(Debug, Clone, Copy)]
pub struct RobitOptions {
    pub max_iterations: usize,
    /// Converged once the Euclidean norm of the score falls below this.
    pub gradient_tolerance: f64,
    pub max_halvings: usize,
}

impl Default for RobitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            max_halvings: 50,
        }
    }
}

/// Returns `(F(eta), 1 - F(eta))` for the Cauchy CDF, each computed from the
/// tail that avoids cancellation.
fn cauchy_tails(eta: f64) -> (f64, f64) {
    if eta < 0.0 {
        let lower = (-1.0 / eta).atan() / PI;
        (lower, 1.0 - lower)
    } else if eta > 0.0 {
        let upper = (1.0 / eta).atan() / PI;
        (1.0 - upper, upper)
    } else {
        (0.5, 0.5)
    }
}

/// Student-t CDF with one degree of freedom: `1/2 + atan(eta)/pi`.
pub fn robit1_cdf(eta: f64) -> f64 {
    cauchy_tails(eta).0
}

fn cauchy_density(eta: f64) -> f64 {
    1.0 / (PI * (1.0 + eta * eta))
}

fn clamped_tails(eta: f64) -> (f64, f64) {
    let (f, g) = cauchy_tails(eta);
    (f.max(P_MIN), g.max(P_MIN))
}

pub fn robit_log_likelihood(design: &DesignMatrix, t: &[bool], beta: &[f64]) -> f64 {
    design
        .rows()
        .zip(t)
        .map(|(r, &t)| {
            let (f, g) = clamped_tails(dot(r, beta));
            if t {
                f.ln()
            } else {
                g.ln()
            }
        })
        .sum()
}

/// Analytic score of the robit(1) log-likelihood.
pub fn robit_gradient(design: &DesignMatrix, t: &[bool], beta: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; design.ncols()];
    for (row, &t) in design.rows().zip(t) {
        let eta = dot(row, beta);
        let (f, g) = clamped_tails(eta);
        let dens = cauchy_density(eta);
        let c = if t { dens / f } else { -dens / g };
        for (gr, x) in grad.iter_mut().zip(row) {
            *gr += c * x;
        }
    }
    grad
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn fit_robit1(design: &DesignMatrix, t: &[bool]) -> Result<PropensityFit> {
    fit_robit1_with(design, t, RobitOptions::default())
}

/// Maximum likelihood with the Cauchy link. Starts from half the logistic
/// coefficients; each step is a Fisher-scoring direction, halved until the
/// log-likelihood does not decrease.
pub fn fit_robit1_with(
    design: &DesignMatrix,
    t: &[bool],
    opts: RobitOptions,
) -> Result<PropensityFit> {
    if design.nrows() != t.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, t has {}",
            design.nrows(),
            t.len()
        )));
    }
    check_classes(t)?;
    let n = t.len();

    let warm = fit_logistic_with(design, t, IrlsOptions::default())?;
    let mut beta: Vec<f64> = warm.coefficients.iter().map(|b| 0.5 * b).collect();
    let mut loglik = robit_log_likelihood(design, t, &beta);
    let mut working = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut note = None;

    while iterations < opts.max_iterations {
        if norm(&robit_gradient(design, t, &beta)) < opts.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        for (i, row) in design.rows().enumerate() {
            let eta = dot(row, &beta);
            let (f, g) = clamped_tails(eta);
            let dens = cauchy_density(eta);
            weights[i] = dens * dens / (f * g);
            let r = if t[i] { g } else { -f };
            working[i] = eta + r / dens;
        }
        let target = fit_least_squares(design, &working, Weights::Supplied(&weights))?.coefficients;
        let direction: Vec<f64> = target.iter().zip(&beta).map(|(a, b)| a - b).collect();

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&direction)
                .map(|(b, d)| b + step * d)
                .collect();
            let ll = robit_log_likelihood(design, t, &cand);
            if ll >= loglik {
                accepted = Some((cand, ll));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, ll)) => {
                let moved = cand != beta;
                beta = cand;
                loglik = ll;
                if !moved {
                    // The Newton gain is below what the log-likelihood can
                    // resolve; at that point the fit is as good as it gets.
                    let grad = robit_gradient(design, t, &beta);
                    let gain: f64 = grad.iter().zip(&direction).map(|(g, d)| g * d).sum();
                    if gain.abs() < 1e-9 {
                        converged = true;
                    } else {
                        note = Some("step halving stalled".into());
                    }
                    break;
                }
            }
            None => {
                note = Some("no ascent step found".into());
                break;
            }
        }
    }
    if !converged && norm(&robit_gradient(design, t, &beta)) < opts.gradient_tolerance {
        converged = true;
    }

    let pi_hat = design
        .rows()
        .map(|r| clamped_tails(dot(r, &beta)).0.min(1.0 - P_MIN))
        .collect();
    Ok(PropensityFit {
        pi_hat,
        method: PsMethod::Robit1,
        covariate_set: design.covariate_set,
        coefficients: beta,
        diagnostics: FitDiagnostics {
            converged,
            iterations,
            note,
            ..Default::default()
        },
    })
}
