//! Design matrices and (weighted) least squares.
//!
//! Fits are solved with Householder QR on the `sqrt(w)`-scaled system. The
//! `x4 = (z2 + z4 + 20)^2` column sits around 400 while the others are O(1),
//! so the normal equations are avoided.

use std::fmt;

use crate::dgp::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CovariateSet {
    Z,
    X,
}

impl CovariateSet {
    pub fn rows<'a>(&self, ds: &'a Dataset) -> &'a [[f64; 4]] {
        match self {
            CovariateSet::Z => &ds.z,
            CovariateSet::X => &ds.x,
        }
    }

    pub fn labels(&self) -> [&'static str; 4] {
        match self {
            CovariateSet::Z => ["z1", "z2", "z3", "z4"],
            CovariateSet::X => ["x1", "x2", "x3", "x4"],
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            CovariateSet::Z => "z",
            CovariateSet::X => "x",
        }
    }
}

impl fmt::Display for CovariateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovariateSet::Z => "Z",
            CovariateSet::X => "X",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSelection {
    All,
    Respondents,
}

/// Row-major design with a leading intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: Vec<f64>,
    nrows: usize,
    labels: Vec<String>,
    /// `None` for hand-built designs.
    pub covariate_set: Option<CovariateSet>,
    pub includes_interaction: bool,
}

impl DesignMatrix {
    /// Builds a design from explicit rows. The first column must be all ones.
    pub fn from_rows(labels: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = labels.len();
        if p == 0 {
            return Err(Error::InvalidInput(
                "design needs at least one column".into(),
            ));
        }
        let mut values = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} values, expected {p}",
                    row.len()
                )));
            }
            if row[0] != 1.0 {
                return Err(Error::InvalidInput(format!(
                    "row {i}: first design column must be the intercept (1)"
                )));
            }
            values.extend_from_slice(row);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "design contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            nrows: rows.len(),
            labels,
            covariate_set: None,
            includes_interaction: false,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.ncols())
    }
}

pub fn build_design(
    ds: &Dataset,
    covariate_set: CovariateSet,
    include_interaction: bool,
    rows: RowSelection,
) -> Result<DesignMatrix> {
    if include_interaction && covariate_set == CovariateSet::X {
        return Err(Error::InvalidInput(
            "interaction column is only defined for the Z covariates".into(),
        ));
    }
    let mut labels = vec!["1".to_string()];
    labels.extend(covariate_set.labels().iter().map(|s| s.to_string()));
    if include_interaction {
        labels.push("z1*z2".into());
    }
    let p = labels.len();
    let covs = covariate_set.rows(ds);
    let mut values = Vec::with_capacity(ds.n() * p);
    let mut nrows = 0;
    for i in 0..ds.n() {
        if rows == RowSelection::Respondents && !ds.t[i] {
            continue;
        }
        values.push(1.0);
        values.extend_from_slice(&covs[i]);
        if include_interaction {
            values.push(ds.z[i][0] * ds.z[i][1]);
        }
        nrows += 1;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "design contains non-finite values".into(),
        ));
    }
    Ok(DesignMatrix {
        values,
        nrows,
        labels,
        covariate_set: Some(covariate_set),
        includes_interaction: include_interaction,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    Uniform,
    Supplied(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Uniform,
    Supplied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    /// Fitted values on the fitting rows.
    pub fitted: Vec<f64>,
    pub weights_used: WeightKind,
    labels: Vec<String>,
}

impl LinearFit {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Relative size of a QR pivot below which a column is treated as a linear
/// combination of the columns before it.
const RANK_TOLERANCE: f64 = 1e-10;

pub fn fit_least_squares(
    design: &DesignMatrix,
    y: &[f64],
    weights: Weights<'_>,
) -> Result<LinearFit> {
    let m = design.nrows();
    let p = design.ncols();
    if y.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "design has {m} rows but y has {}",
            y.len()
        )));
    }
    if m < p {
        return Err(Error::InvalidInput(format!(
            "least squares needs at least {p} rows, got {m}"
        )));
    }
    let sqrt_w: Option<Vec<f64>> = match weights {
        Weights::Uniform => None,
        Weights::Supplied(w) => {
            if w.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "design has {m} rows but {} weights were supplied",
                    w.len()
                )));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            if w.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroWeight("least-squares weights".into()));
            }
            Some(w.iter().map(|v| v.sqrt()).collect())
        }
    };

    // Column-major copy of the scaled system.
    let mut cols: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            (0..m)
                .map(|i| {
                    let v = design.values[i * p + j];
                    sqrt_w.as_ref().map_or(v, |s| v * s[i])
                })
                .collect()
        })
        .collect();
    let mut rhs: Vec<f64> = match &sqrt_w {
        None => y.to_vec(),
        Some(s) => y.iter().zip(s).map(|(v, s)| v * s).collect(),
    };

    let col_norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut diag = vec![0.0; p];
    let mut collinear = Vec::new();

    for k in 0..p {
        let (head, tail) = cols.split_at_mut(k + 1);
        let ck = &mut head[k];
        let alpha_norm = norm(&ck[k..]);
        if alpha_norm <= RANK_TOLERANCE * col_norms[k] || alpha_norm == 0.0 {
            collinear.push(design.labels[k].clone());
            continue;
        }
        let alpha = if ck[k] > 0.0 { -alpha_norm } else { alpha_norm };
        ck[k] -= alpha;
        let v = &ck[k..];
        let vnorm2: f64 = v.iter().map(|a| a * a).sum();
        for cj in tail.iter_mut() {
            let s = 2.0 * dot(v, &cj[k..]) / vnorm2;
            for (a, b) in cj[k..].iter_mut().zip(v) {
                *a -= s * b;
            }
        }
        let s = 2.0 * dot(v, &rhs[k..]) / vnorm2;
        for (a, b) in rhs[k..].iter_mut().zip(v) {
            *a -= s * b;
        }
        diag[k] = alpha;
    }
    if !collinear.is_empty() {
        return Err(Error::RankDeficient { columns: collinear });
    }

    // Back substitution on R (upper triangle lives in cols[j][..j], diagonal in diag).
    let mut beta = vec![0.0; p];
    for k in (0..p).rev() {
        let mut acc = rhs[k];
        for j in k + 1..p {
            acc -= cols[j][k] * beta[j];
        }
        beta[k] = acc / diag[k];
    }

    let fitted = design.rows().map(|r| dot(r, &beta)).collect();
    Ok(LinearFit {
        coefficients: beta,
        fitted,
        weights_used: match weights {
            Weights::Uniform => WeightKind::Uniform,
            Weights::Supplied(_) => WeightKind::Supplied,
        },
        labels: design.labels.clone(),
    })
}

pub fn predict(fit: &LinearFit, design: &DesignMatrix) -> Result<Vec<f64>> {
    if fit.labels != design.labels {
        return Err(Error::ColumnMismatch {
            expected: fit.labels.clone(),
            found: design.labels.clone(),
        });
    }
    Ok(design.rows().map(|r| dot(r, &fit.coefficients)).collect())
}

/// `||X^T W (y - X b)||_inf / (1 + ||X^T W y||_inf)`; zero at an exact solution.
pub fn normal_equation_residual(
    design: &DesignMatrix,
    y: &[f64],
    weights: Weights<'_>,
    coefficients: &[f64],
) -> f64 {
    let p = design.ncols();
    let mut score = vec![0.0; p];
    let mut xty = vec![0.0; p];
    for (i, row) in design.rows().enumerate() {
        let w = match weights {
            Weights::Uniform => 1.0,
            Weights::Supplied(w) => w[i],
        };
        let resid = y[i] - dot(row, coefficients);
        for j in 0..p {
            score[j] += row[j] * w * resid;
            xty[j] += row[j] * w * y[i];
        }
    }
    max_abs(&score) / (1.0 + max_abs(&xty))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    // Scaled to avoid overflow on squared entries of large columns.
    let scale = max_abs(a);
    if scale == 0.0 {
        return 0.0;
    }
    scale
        * a.iter()
            .map(|v| (v / scale) * (v / scale))
            .sum::<f64>()
            .sqrt()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
