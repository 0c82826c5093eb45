use super::{check_classes, clamp_probability, FitDiagnostics, PropensityFit, PsMethod};
use crate::dgp::expit;
use crate::error::{Error, Result};
use crate::linear_models::{dot, fit_least_squares, DesignMatrix, Weights};

/// Bound on `|x'b|` during IRLS. Keeps arithmetic finite under (quasi-)separation
/// while still allowing the extreme fitted probabilities such fits produce.
pub const ETA_CAP: f64 = 30.0;

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub max_iterations: usize,
    /// Stop when the largest coefficient change or the largest score component
    /// falls below this.
    pub tolerance: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

fn probabilities(design: &DesignMatrix, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    design
        .rows()
        .map(|r| {
            let eta = dot(r, beta).clamp(-ETA_CAP, ETA_CAP);
            (eta, clamp_probability(expit(eta)))
        })
        .unzip()
}

/// `X'(t - p)` at `beta`, using the capped link.
pub fn logistic_score(design: &DesignMatrix, t: &[bool], beta: &[f64]) -> Vec<f64> {
    let (_, p) = probabilities(design, beta);
    let mut score = vec![0.0; design.ncols()];
    for (i, row) in design.rows().enumerate() {
        let r = f64::from(u8::from(t[i])) - p[i];
        for (s, x) in score.iter_mut().zip(row) {
            *s += x * r;
        }
    }
    score
}

pub fn fit_logistic(design: &DesignMatrix, t: &[bool]) -> Result<PropensityFit> {
    fit_logistic_with(design, t, IrlsOptions::default())
}

pub fn fit_logistic_with(
    design: &DesignMatrix,
    t: &[bool],
    opts: IrlsOptions,
) -> Result<PropensityFit> {
    if design.nrows() != t.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, t has {}",
            design.nrows(),
            t.len()
        )));
    }
    let responders = check_classes(t)?;
    let n = t.len();
    let p_bar = responders as f64 / n as f64;

    let mut beta = vec![0.0; design.ncols()];
    beta[0] = (p_bar / (1.0 - p_bar)).ln();
    let mut converged = false;
    let mut iterations = 0;
    let mut norms = Vec::new();
    let mut working = vec![0.0; n];
    let mut weights = vec![0.0; n];

    while iterations < opts.max_iterations {
        iterations += 1;
        let (eta, p) = probabilities(design, &beta);
        for i in 0..n {
            let w = p[i] * (1.0 - p[i]);
            weights[i] = w;
            working[i] = eta[i] + (f64::from(u8::from(t[i])) - p[i]) / w;
        }
        let next = fit_least_squares(design, &working, Weights::Supplied(&weights))?.coefficients;
        let step = next
            .iter()
            .zip(&beta)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        beta = next;
        norms.push(beta.iter().map(|b| b * b).sum::<f64>().sqrt());
        let score = logistic_score(design, t, &beta);
        let score_max = score.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        if step < opts.tolerance || score_max < opts.tolerance {
            converged = true;
            break;
        }
    }

    let (eta, pi_hat) = probabilities(design, &beta);
    let capped = eta.iter().filter(|e| e.abs() >= ETA_CAP).count();
    let diverging = norms.len() >= 4 && norms.windows(2).rev().take(3).all(|w| w[1] > w[0] * 1.01);
    let note = if capped > 0 || (!converged && diverging) {
        Some(format!(
            "possible separation: {capped} unit(s) at the linear-predictor cap, coefficient norm {:.3e}",
            norms.last().copied().unwrap_or(0.0)
        ))
    } else {
        None
    };

    Ok(PropensityFit {
        pi_hat,
        method: PsMethod::Logistic,
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
