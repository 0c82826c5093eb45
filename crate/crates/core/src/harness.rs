//! Monte Carlo runs over replicates and assembly of the RMSE ratio tables.
//!
//! Both generating scenarios use the same seed, so a replicate's `Z`, `X`
//! and response pattern are identical across them and only the outcome
//! differs. Propensity fits depend on covariates and response alone, so each
//! replicate fits every propensity model at most once and shares the fit
//! across rows, columns, scenarios and tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::dgp::{generate_checked, Dataset, Scenario, DEFAULT_INTERACTION_COEF};
use crate::error::{Error, Result};
use crate::estimators::{evaluate, Estimate, EstimateDiagnostics, EstimatorSpec, Family};
use crate::linear_models::{build_design, CovariateSet, RowSelection};
use crate::propensity::{
    fit_gbm, fit_logistic, fit_robit1, BoostingPath, GbmParams, GbmProfile, PropensityFit, PsMethod,
};
use crate::weighting::{
    apply_weight_cap, compute_weights, effective_sample_size, max_marginal_ks, BalanceReference,
    BalanceSpec, Scheme,
};

/// A cell is abandoned when more than this fraction of its replicates fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

pub const DEFAULT_SEED: u64 = 20_070_101;

/// Root mean squared error of `estimates` about `truth`.
pub fn rmse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("no estimates for RMSE".into()));
    }
    let ss: f64 = estimates.iter().map(|e| (e - truth) * (e - truth)).sum();
    Ok((ss / estimates.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableId {
    /// IPW estimators.
    Table1,
    /// Doubly robust estimators.
    Table2,
}

impl TableId {
    pub fn id(&self) -> &'static str {
        match self {
            TableId::Table1 => "table1",
            TableId::Table2 => "table2",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s {
            "table1" => Some(TableId::Table1),
            "table2" => Some(TableId::Table2),
            _ => None,
        }
    }
}

/// Generating scenario plus outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Column {
    KsZ,
    KsX,
    IntZi,
    IntZ,
    IntX,
}

impl Column {
    pub const ALL: [Column; 5] = [
        Column::KsZ,
        Column::KsX,
        Column::IntZi,
        Column::IntZ,
        Column::IntX,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Column::KsZ => "ks-z",
            Column::KsX => "ks-x",
            Column::IntZi => "int-zi",
            Column::IntZ => "int-z",
            Column::IntX => "int-x",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Column::ALL.into_iter().find(|c| c.id() == s)
    }

    pub fn interaction(&self) -> bool {
        matches!(self, Column::IntZi | Column::IntZ | Column::IntX)
    }

    pub fn y_covariates(&self) -> CovariateSet {
        match self {
            Column::KsX | Column::IntX => CovariateSet::X,
            _ => CovariateSet::Z,
        }
    }

    pub fn y_interaction(&self) -> bool {
        *self == Column::IntZi
    }

    /// Whether the outcome model matches the generating model.
    pub fn outcome_model_correct(&self) -> bool {
        matches!(self, Column::KsZ | Column::IntZi)
    }

    fn header(&self) -> &'static str {
        match self {
            Column::KsZ => "Base: fit with Z",
            Column::KsX => "Base: fit with X",
            Column::IntZi => "Interaction: fit with Z and interaction",
            Column::IntZ => "Interaction: fit with Z, no interaction",
            Column::IntX => "Interaction: fit with X",
        }
    }
}

/// Table row: the estimator before the outcome-model column is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowKind {
    Ols,
    Ipw {
        method: PsMethod,
        covariates: CovariateSet,
        scheme: Scheme,
    },
    DoublyRobust {
        family: Family,
        method: PsMethod,
        covariates: CovariateSet,
    },
}

impl RowKind {
    fn labels(&self) -> [String; 3] {
        match *self {
            RowKind::Ols => ["OLS".into(), String::new(), String::new()],
            RowKind::Ipw {
                method,
                covariates,
                scheme,
            } => [
                method.to_string(),
                covariates.to_string(),
                scheme.to_string(),
            ],
            RowKind::DoublyRobust {
                family,
                method,
                covariates,
            } => [
                method.to_string(),
                covariates.to_string(),
                family.id().to_uppercase(),
            ],
        }
    }
}

pub fn table_rows(table: TableId) -> Vec<RowKind> {
    let mut rows = vec![RowKind::Ols];
    match table {
        TableId::Table1 => {
            for method in [PsMethod::Logistic, PsMethod::Gbm, PsMethod::Robit1] {
                for covariates in [CovariateSet::Z, CovariateSet::X] {
                    for scheme in [Scheme::Pop, Scheme::Nr] {
                        rows.push(RowKind::Ipw {
                            method,
                            covariates,
                            scheme,
                        });
                    }
                }
            }
        }
        TableId::Table2 => {
            let models = [
                (PsMethod::Logistic, CovariateSet::Z),
                (PsMethod::Logistic, CovariateSet::X),
                (PsMethod::Gbm, CovariateSet::X),
                (PsMethod::Robit1, CovariateSet::X),
            ];
            for (method, covariates) in models {
                for family in [Family::Bc, Family::Wls] {
                    rows.push(RowKind::DoublyRobust {
                        family,
                        method,
                        covariates,
                    });
                }
            }
        }
    }
    rows
}

/// One (row, column) entry of a table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub table: TableId,
    /// Index into [`table_rows`].
    pub row: usize,
    pub column: Column,
    pub estimator: EstimatorSpec,
    /// Propensity covariates swapped from X to Z in this cell.
    pub starred: bool,
}

impl CellSpec {
    fn new(
        table: TableId,
        row: usize,
        kind: RowKind,
        column: Column,
        ipw_normalized: bool,
    ) -> Self {
        let (estimator, starred) = match kind {
            RowKind::Ols => (
                EstimatorSpec::ols(column.y_covariates(), column.y_interaction()),
                false,
            ),
            RowKind::Ipw {
                method,
                covariates,
                scheme,
            } => (
                EstimatorSpec::ipw(method, covariates, scheme, ipw_normalized),
                false,
            ),
            RowKind::DoublyRobust {
                family,
                method,
                covariates,
            } => {
                // Flexible propensity models are fit with Z when the outcome
                // model is Z without the interaction.
                let starred = column == Column::IntZ
                    && covariates == CovariateSet::X
                    && method != PsMethod::Logistic;
                let covs = if starred { CovariateSet::Z } else { covariates };
                (
                    EstimatorSpec::doubly_robust(
                        family,
                        method,
                        covs,
                        column.y_covariates(),
                        column.y_interaction(),
                    ),
                    starred,
                )
            }
        };
        Self {
            table,
            row,
            column,
            estimator,
            starred,
        }
    }

    /// `<table>:<ps_method>:<ps_covs>:<scheme_or_family>:<y_model>`.
    pub fn id(&self) -> String {
        format!(
            "{}:{}:{}",
            self.table.id(),
            self.estimator.id(),
            self.column.id()
        )
    }

    /// Row id without the column part, using the row's nominal covariates.
    pub fn row_id(&self) -> String {
        let kind = table_rows(self.table)[self.row];
        let spec = CellSpec::new(
            self.table,
            self.row,
            kind,
            Column::KsZ,
            self.estimator.ipw_normalized,
        );
        format!("{}:{}", self.table.id(), spec.estimator.id())
    }

    /// The propensity fit this cell consumes, if any.
    pub fn fit_key(&self) -> Option<FitKey> {
        let e = &self.estimator;
        let (method, covariates) = (e.ps_method?, e.ps_covariates?);
        let selection = (method == PsMethod::Gbm).then(|| e.scheme.unwrap_or(Scheme::Pop));
        Some(FitKey {
            method,
            covariates,
            selection,
        })
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

pub fn table_cells(table: TableId, ipw_normalized: bool) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for (r, kind) in table_rows(table).into_iter().enumerate() {
        for column in Column::ALL {
            cells.push(CellSpec::new(table, r, kind, column, ipw_normalized));
        }
    }
    cells
}

pub fn find_cell(id: &str, ipw_normalized: bool) -> Result<CellSpec> {
    [TableId::Table1, TableId::Table2]
        .into_iter()
        .flat_map(|t| table_cells(t, ipw_normalized))
        .find(|c| c.id() == id)
        .ok_or_else(|| Error::UnknownCell(id.to_string()))
}

/// Identifies a propensity fit within one replicate. Boosted fits also depend
/// on the weighting scheme used to pick the tree count; doubly robust rows use
/// the POP selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FitKey {
    pub method: PsMethod,
    pub covariates: CovariateSet,
    pub selection: Option<Scheme>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub gbm: GbmParams,
    pub balance_reference: BalanceReference,
    /// Floors estimator propensities at `1/cap`; balance selection is unaffected.
    pub weight_cap: Option<f64>,
    pub interaction_coef: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            replicates: 1000,
            seed: DEFAULT_SEED,
            gbm: GbmProfile::Desk.params(),
            balance_reference: BalanceReference::Default,
            weight_cap: None,
            interaction_coef: DEFAULT_INTERACTION_COEF,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidInput(
                "at least one replicate is required".into(),
            ));
        }
        if let Some(cap) = self.weight_cap {
            if !(cap > 1.0) {
                return Err(Error::InvalidInput(format!(
                    "weight cap must exceed 1, got {cap}"
                )));
            }
        }
        if !self.interaction_coef.is_finite() {
            return Err(Error::InvalidInput(
                "interaction coefficient must be finite".into(),
            ));
        }
        self.gbm.validate()?;
        self.scenario(false).map(|_| ())
    }

    pub fn scenario(&self, interaction: bool) -> Result<Scenario> {
        Ok(Scenario::new(self.n, interaction, self.seed)?
            .with_interaction_coef(self.interaction_coef))
    }
}

/// Fits a propensity model from scratch.
pub fn fit_propensity(ds: &Dataset, key: FitKey, config: &SimConfig) -> Result<PropensityFit> {
    match key.method {
        PsMethod::Logistic | PsMethod::Robit1 => {
            let design = build_design(ds, key.covariates, false, RowSelection::All)?;
            if key.method == PsMethod::Logistic {
                fit_logistic(&design, &ds.t)
            } else {
                fit_robit1(&design, &ds.t)
            }
        }
        PsMethod::Gbm => {
            let balance = balance_spec(key, config);
            let covs = key.covariates.rows(ds);
            Ok(fit_gbm(covs, &ds.t, &config.gbm, balance, Some(key.covariates))?.1)
        }
    }
}

fn balance_spec(key: FitKey, config: &SimConfig) -> BalanceSpec {
    BalanceSpec {
        scheme: key.selection.unwrap_or(Scheme::Pop),
        reference: config.balance_reference,
    }
}

/// Per-replicate memo of propensity fits. Boosting paths are trained once
/// per covariate set and selected separately for each scheme.
pub struct FitCache<'a> {
    ds: &'a Dataset,
    config: &'a SimConfig,
    fits: BTreeMap<FitKey, Result<PropensityFit>>,
    paths: BTreeMap<CovariateSet, Result<BoostingPath>>,
}

impl<'a> FitCache<'a> {
    pub fn new(ds: &'a Dataset, config: &'a SimConfig) -> Self {
        Self {
            ds,
            config,
            fits: BTreeMap::new(),
            paths: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, key: FitKey) -> Result<&PropensityFit> {
        if !self.fits.contains_key(&key) {
            let fit = match key.method {
                PsMethod::Gbm => self.gbm_fit(key),
                _ => fit_propensity(self.ds, key, self.config),
            };
            self.fits.insert(key, fit);
        }
        self.fits[&key].as_ref().map_err(Clone::clone)
    }

    fn gbm_fit(&mut self, key: FitKey) -> Result<PropensityFit> {
        let (ds, config) = (self.ds, self.config);
        let path = self.paths.entry(key.covariates).or_insert_with(|| {
            BoostingPath::train(
                key.covariates.rows(ds),
                &ds.t,
                &config.gbm,
                Some(key.covariates),
            )
        });
        let path = path.as_ref().map_err(Clone::clone)?;
        Ok(path.select(balance_spec(key, config))?.0)
    }

    /// Fits computed so far, in key order.
    pub fn fits(&self) -> impl Iterator<Item = (&FitKey, &Result<PropensityFit>)> {
        self.fits.iter()
    }
}

/// Balance and weight summary for one scheme applied to one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub scheme: Scheme,
    pub max_ks: f64,
    pub ess: f64,
    pub max_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub replicate: u64,
    pub key: FitKey,
    pub outcome: std::result::Result<FitSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub chosen_iterations: Option<usize>,
    pub achieved_max_ks: Option<f64>,
    pub note: Option<String>,
    pub weights: Vec<WeightRecord>,
}

fn estimator_propensities(fit: &PropensityFit, config: &SimConfig) -> Vec<f64> {
    match config.weight_cap {
        Some(cap) => apply_weight_cap(&fit.pi_hat, cap),
        None => fit.pi_hat.clone(),
    }
}

fn summarize_fit(ds: &Dataset, key: FitKey, fit: &PropensityFit, config: &SimConfig) -> FitSummary {
    let schemes = match key.selection {
        Some(s) => vec![s],
        None => vec![Scheme::Pop, Scheme::Nr],
    };
    let pi = estimator_propensities(fit, config);
    let covs = key.covariates.rows(ds);
    let weights = schemes
        .into_iter()
        .filter_map(|scheme| {
            let w = compute_weights(&pi, &ds.t, scheme).ok()?;
            Some(WeightRecord {
                scheme,
                max_ks: max_marginal_ks(covs, &ds.t, &w).ok()?,
                ess: effective_sample_size(w.as_slice()),
                max_weight: w.max_weight(),
            })
        })
        .collect();
    let d = &fit.diagnostics;
    FitSummary {
        converged: d.converged,
        iterations: d.iterations,
        chosen_iterations: d.chosen_iterations,
        achieved_max_ks: d.achieved_max_ks,
        note: d.note.clone(),
        weights,
    }
}

struct ReplicateOutput {
    estimates: Vec<Result<Estimate>>,
    /// Per cell: GBM tree count and convergence of the fit it used.
    fit_info: Vec<Option<(bool, Option<usize>, Option<f64>)>>,
    fits: Vec<FitRecord>,
}

fn run_replicate(
    cells: &[CellSpec],
    config: &SimConfig,
    scenarios: &[Scenario; 2],
    r: u64,
) -> Result<ReplicateOutput> {
    let base = generate_checked(&scenarios[0], r)?;
    let needs_interaction = cells.iter().any(|c| c.column.interaction());
    let with_interaction = if needs_interaction {
        Some(generate_checked(&scenarios[1], r)?)
    } else {
        None
    };
    let mut cache = FitCache::new(&base, config);
    let mut estimates = Vec::with_capacity(cells.len());
    let mut fit_info = Vec::with_capacity(cells.len());
    for cell in cells {
        let ds = match (cell.column.interaction(), &with_interaction) {
            (true, Some(ds)) => ds,
            _ => &base,
        };
        let (estimate, info) = match cell.fit_key() {
            None => (evaluate(&cell.estimator, ds, None), None),
            Some(key) => match cache.get(key) {
                Ok(fit) => {
                    let pi = estimator_propensities(fit, config);
                    let d = &fit.diagnostics;
                    let info = (d.converged, d.chosen_iterations, d.achieved_max_ks);
                    let mut est = evaluate(&cell.estimator, ds, Some(&pi));
                    if let Ok(e) = est.as_mut() {
                        e.diagnostics.ps_converged = Some(d.converged);
                    }
                    (est, Some(info))
                }
                Err(e) => (Err(e), None),
            },
        };
        estimates.push(estimate);
        fit_info.push(info);
    }
    let fits = cache
        .fits()
        .map(|(&key, fit)| FitRecord {
            replicate: r,
            key,
            outcome: fit
                .as_ref()
                .map(|f| summarize_fit(&base, key, f, config))
                .map_err(|e| e.to_string()),
        })
        .collect();
    Ok(ReplicateOutput {
        estimates,
        fit_info,
        fits,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellSummary {
    pub mean_ess: Option<f64>,
    pub mean_max_weight: Option<f64>,
    pub largest_weight: Option<f64>,
    pub mean_chosen_iterations: Option<f64>,
    pub mean_achieved_max_ks: Option<f64>,
    pub nonconverged_fits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: CellSpec,
    pub scenario: Scenario,
    /// One entry per replicate in replicate order; `None` marks a failure.
    pub values: Vec<Option<f64>>,
    pub diagnostics: Vec<Option<EstimateDiagnostics>>,
    /// `(replicate, message)` for each failed replicate.
    pub errors: Vec<(u64, String)>,
    pub summary: CellSummary,
}

impl CellResult {
    pub fn replicates(&self) -> usize {
        self.values.len()
    }

    /// Successful estimates in replicate order.
    pub fn estimates(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn failures(&self) -> usize {
        self.errors.len()
    }

    pub fn rmse(&self) -> Result<f64> {
        rmse(&self.estimates(), self.scenario.truth())
    }

    pub fn aborted(&self) -> bool {
        self.failures() as f64 > MAX_FAILURE_FRACTION * self.replicates() as f64
    }

    pub fn abort_error(&self) -> Option<Error> {
        self.aborted().then(|| Error::CellAborted {
            cell: self.cell.id(),
            failures: self.failures(),
            replicates: self.replicates(),
            last_error: self.errors.last().map(|e| e.1.clone()).unwrap_or_default(),
        })
    }
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    (k > 0).then(|| s / k as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub cells: Vec<CellResult>,
    /// Propensity fits by replicate, then key.
    pub fits: Vec<FitRecord>,
}

impl RunOutput {
    pub fn cell(&self, id: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.id() == id)
    }

    /// The first aborted cell, in cell order.
    pub fn first_abort(&self) -> Option<Error> {
        self.cells.iter().find_map(CellResult::abort_error)
    }
}

pub fn run_cells(cells: &[CellSpec], config: &SimConfig) -> Result<RunOutput> {
    run_cells_with_progress(cells, config, |_, _| {})
}

/// Like [`run_cells`], calling `progress(done, total)` as replicates finish.
pub fn run_cells_with_progress(
    cells: &[CellSpec],
    config: &SimConfig,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<RunOutput> {
    config.validate()?;
    for c in cells {
        c.estimator.validate()?;
    }
    let scenarios = [config.scenario(false)?, config.scenario(true)?];
    let total = config.replicates;
    let done = AtomicUsize::new(0);
    let outputs: Vec<Result<ReplicateOutput>> = (0..total as u64)
        .into_par_iter()
        .map(|r| {
            let out = run_replicate(cells, config, &scenarios, r);
            progress(done.fetch_add(1, Ordering::Relaxed) + 1, total);
            out
        })
        .collect();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut results = Vec::with_capacity(cells.len());
    for (j, cell) in cells.iter().enumerate() {
        let mut values = Vec::with_capacity(total);
        let mut diagnostics = Vec::with_capacity(total);
        let mut errors = Vec::new();
        let mut infos = Vec::new();
        for (r, out) in outputs.iter().enumerate() {
            match &out.estimates[j] {
                Ok(e) => {
                    values.push(Some(e.value));
                    diagnostics.push(Some(e.diagnostics));
                }
                Err(e) => {
                    values.push(None);
                    diagnostics.push(None);
                    errors.push((r as u64, e.to_string()));
                }
            }
            infos.extend(out.fit_info[j]);
        }
        let ok = || diagnostics.iter().flatten();
        let summary = CellSummary {
            mean_ess: mean_of(ok().filter_map(|d| d.ess)),
            mean_max_weight: mean_of(ok().filter_map(|d| d.max_weight)),
            largest_weight: ok().filter_map(|d| d.max_weight).reduce(f64::max),
            mean_chosen_iterations: mean_of(infos.iter().filter_map(|i| i.1.map(|k| k as f64))),
            mean_achieved_max_ks: mean_of(infos.iter().filter_map(|i| i.2)),
            nonconverged_fits: infos.iter().filter(|i| !i.0).count(),
        };
        results.push(CellResult {
            cell: *cell,
            scenario: scenarios[usize::from(cell.column.interaction())],
            values,
            diagnostics,
            errors,
            summary,
        });
    }
    let fits = outputs.into_iter().flat_map(|o| o.fits).collect();
    Ok(RunOutput {
        cells: results,
        fits,
    })
}

/// Runs a single estimator in one scenario.
pub fn run_cell(spec: CellSpec, config: &SimConfig) -> Result<CellResult> {
    let mut out = run_cells(&[spec], config)?;
    let cell = out.cells.remove(0);
    match cell.abort_error() {
        Some(e) => Err(e),
        None => Ok(cell),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub id: String,
    pub rmse: f64,
    pub ratio: f64,
    pub starred: bool,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseTable {
    pub table: TableId,
    pub rows: Vec<RowKind>,
    pub columns: Vec<Column>,
    /// Per column, the OLS RMSE the ratios are taken against.
    pub ols_rmse: Vec<f64>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<TableCell>>,
    pub replicates: usize,
}

impl RmseTable {
    /// Builds the table from the results of all its cells (extra results are ignored).
    pub fn assemble(table: TableId, results: &[CellResult]) -> Result<Self> {
        let rows = table_rows(table);
        let columns = Column::ALL.to_vec();
        let lookup: HashMap<(usize, Column), &CellResult> = results
            .iter()
            .filter(|c| c.cell.table == table)
            .map(|c| ((c.cell.row, c.cell.column), c))
            .collect();
        let get = |r: usize, c: Column| {
            lookup.get(&(r, c)).copied().ok_or_else(|| {
                Error::UnknownCell(format!("{}: row {r} column {}", table.id(), c.id()))
            })
        };
        let ols_rmse = columns
            .iter()
            .map(|&c| get(0, c)?.rmse())
            .collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::with_capacity(rows.len());
        let mut replicates = 0;
        for r in 0..rows.len() {
            let mut row = Vec::with_capacity(columns.len());
            for (k, &c) in columns.iter().enumerate() {
                let res = get(r, c)?;
                if let Some(e) = res.abort_error() {
                    return Err(e);
                }
                replicates = res.replicates();
                let value = res.rmse()?;
                row.push(TableCell {
                    id: res.cell.id(),
                    rmse: value,
                    ratio: value / ols_rmse[k],
                    starred: res.cell.starred,
                    failures: res.failures(),
                });
            }
            cells.push(row);
        }
        Ok(Self {
            table,
            rows,
            columns,
            ols_rmse,
            cells,
            replicates,
        })
    }

    pub fn find(&self, row: RowKind, column: Column) -> Option<&TableCell> {
        let r = self.rows.iter().position(|&k| k == row)?;
        let c = self.columns.iter().position(|&k| k == column)?;
        Some(&self.cells[r][c])
    }

    pub fn ratio(&self, row: RowKind, column: Column) -> Option<f64> {
        self.find(row, column).map(|c| c.ratio)
    }

    /// Ratios to one decimal; the OLS row shows its RMSE in parentheses.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let title = match self.table {
            TableId::Table1 => "IPW estimators",
            TableId::Table2 => "Doubly robust estimators",
        };
        let _ = writeln!(
            s,
            "{title}: RMSE relative to OLS ({} replicates)\n",
            self.replicates
        );
        s.push_str("| Propensity model | Covariates | Estimator |");
        for c in &self.columns {
            let _ = write!(s, " {} |", c.header());
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---:|".repeat(self.columns.len()));
        s.push('\n');
        for (r, kind) in self.rows.iter().enumerate() {
            let [a, b, c] = kind.labels();
            let _ = write!(s, "| {a} | {b} | {c} |");
            for (k, cell) in self.cells[r].iter().enumerate() {
                let mut text = format!("{}{:.1}", if cell.starred { "*" } else { "" }, cell.ratio);
                if *kind == RowKind::Ols {
                    let _ = write!(text, " ({:.2})", self.ols_rmse[k]);
                }
                if cell.failures > 0 {
                    let _ = write!(text, " [{} failed]", cell.failures);
                }
                let _ = write!(s, " {text} |");
            }
            s.push('\n');
        }
        if self.cells.iter().flatten().any(|c| c.starred) {
            s.push_str("\n\\* Propensity model fit with Z.\n");
        }
        s
    }

    /// One row per table row: ratios per column at full precision, then the
    /// OLS RMSE per column, then the starred columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "row_id".to_string(),
            "propensity_model".into(),
            "covariates".into(),
            "estimator".into(),
        ];
        header.extend(self.columns.iter().map(|c| c.id().to_string()));
        header.extend(self.columns.iter().map(|c| format!("ols_rmse_{}", c.id())));
        header.push("starred".into());
        w.write_record(&header)?;
        let ols: Vec<String> = self.ols_rmse.iter().map(f64::to_string).collect();
        for (r, kind) in self.rows.iter().enumerate() {
            let [a, b, c] = kind.labels();
            let first = &self.cells[r][0].id;
            let row_id = first[..first.rfind(':').unwrap_or(first.len())].to_string();
            let mut rec = vec![row_id, a, b, c];
            rec.extend(self.cells[r].iter().map(|c| c.ratio.to_string()));
            rec.extend(ols.iter().cloned());
            let starred: Vec<&str> = self.cells[r]
                .iter()
                .zip(&self.columns)
                .filter(|(c, _)| c.starred)
                .map(|(_, col)| col.id())
                .collect();
            rec.push(starred.join(";"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the listed tables over one shared set of replicates.
pub fn run_tables(
    tables: &[TableId],
    config: &SimConfig,
    ipw_normalized: bool,
) -> Result<(Vec<RmseTable>, RunOutput)> {
    let cells: Vec<CellSpec> = tables
        .iter()
        .flat_map(|&t| table_cells(t, ipw_normalized))
        .collect();
    let out = run_cells(&cells, config)?;
    let assembled = tables
        .iter()
        .map(|&t| RmseTable::assemble(t, &out.cells))
        .collect::<Result<Vec<_>>>()?;
    Ok((assembled, out))
}

pub fn run_table1(config: &SimConfig, ipw_normalized: bool) -> Result<RmseTable> {
    Ok(run_tables(&[TableId::Table1], config, ipw_normalized)?
        .0
        .remove(0))
}

pub fn run_table2(config: &SimConfig) -> Result<RmseTable> {
    Ok(run_tables(&[TableId::Table2], config, true)?.0.remove(0))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-cell summary: failures, RMSE, ratio, weight and GBM diagnostics.
pub fn write_diagnostics_csv<W: Write>(out: W, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "cell_id",
        "table",
        "column",
        "scenario",
        "starred",
        "replicates",
        "failures",
        "rmse",
        "ols_rmse",
        "ratio",
        "mean_estimate",
        "mean_ess",
        "mean_max_weight",
        "largest_weight",
        "mean_chosen_iterations",
        "mean_achieved_max_ks",
        "nonconverged_fits",
        "last_error",
    ])?;
    let ols: HashMap<(TableId, Column), f64> = results
        .iter()
        .filter(|c| c.cell.estimator.family == Family::Ols)
        .filter_map(|c| Some(((c.cell.table, c.cell.column), c.rmse().ok()?)))
        .collect();
    for res in results {
        let est = res.estimates();
        let rmse = res.rmse().ok();
        let ols_rmse = ols.get(&(res.cell.table, res.cell.column)).copied();
        let ratio = rmse.zip(ols_rmse).map(|(a, b)| a / b);
        let s = &res.summary;
        w.write_record([
            res.cell.id(),
            res.cell.table.id().into(),
            res.cell.column.id().into(),
            if res.scenario.interaction {
                "interaction"
            } else {
                "base"
            }
            .into(),
            res.cell.starred.to_string(),
            res.replicates().to_string(),
            res.failures().to_string(),
            opt(rmse),
            opt(ols_rmse),
            opt(ratio),
            opt(mean_of(est.iter().copied())),
            opt(s.mean_ess),
            opt(s.mean_max_weight),
            opt(s.largest_weight),
            opt(s.mean_chosen_iterations),
            opt(s.mean_achieved_max_ks),
            s.nonconverged_fits.to_string(),
            res.errors.last().map(|e| e.1.clone()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per (replicate, cell).
pub fn write_estimate_log<W: Write>(out: W, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate",
        "cell_id",
        "value",
        "max_weight",
        "ess",
        "ps_converged",
        "error",
    ])?;
    for res in results {
        let id = res.cell.id();
        let mut errors = res.errors.iter().peekable();
        for (r, (v, d)) in res.values.iter().zip(&res.diagnostics).enumerate() {
            let err = match errors.peek() {
                Some((er, _)) if *er == r as u64 => errors.next().map(|e| e.1.clone()),
                _ => None,
            };
            w.write_record([
                r.to_string(),
                id.clone(),
                opt(*v),
                opt(d.and_then(|d| d.max_weight)),
                opt(d.and_then(|d| d.ess)),
                d.and_then(|d| d.ps_converged)
                    .map(|b| b.to_string())
                    .unwrap_or_default(),
                err.unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per (replicate, propensity fit, scheme) balance and weight diagnostics.
pub fn write_weight_diagnostics<W: Write>(out: W, fits: &[FitRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate",
        "method",
        "covariate_set",
        "scheme",
        "max_ks",
        "ess",
        "max_weight",
        "converged",
        "chosen_iterations",
        "note",
    ])?;
    for f in fits {
        let base = |scheme: &str| {
            vec![
                f.replicate.to_string(),
                f.key.method.id().to_string(),
                f.key.covariates.id().to_string(),
                scheme.to_string(),
            ]
        };
        match &f.outcome {
            Ok(s) => {
                for wr in &s.weights {
                    let mut rec = base(wr.scheme.id());
                    rec.extend([
                        wr.max_ks.to_string(),
                        wr.ess.to_string(),
                        wr.max_weight.to_string(),
                        s.converged.to_string(),
                        s.chosen_iterations
                            .map(|k| k.to_string())
                            .unwrap_or_default(),
                        s.note.clone().unwrap_or_default(),
                    ]);
                    w.write_record(&rec)?;
                }
            }
            Err(e) => {
                let mut rec = base(f.key.selection.map_or("", |s| s.id()));
                rec.extend([
                    String::new(),
                    String::new(),
                    String::new(),
                    "false".into(),
                    String::new(),
                    e.clone(),
                ]);
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
