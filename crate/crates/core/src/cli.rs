//! Run configuration and the command-line pipeline.
//!
//! Settings come from defaults, then an optional flat `key=value` file, then
//! flags. The run manifest is written in the same format, so it can be fed
//! back with `--config` to repeat a run or, with `--only-cell`, one cell.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

use crate::dgp::{generate_replicate, write_dataset_csv, DEFAULT_INTERACTION_COEF};
use crate::error::Error;
use crate::harness::{
    find_cell, run_cells_with_progress, table_cells, write_diagnostics_csv, write_estimate_log,
    write_weight_diagnostics, CellSpec, RmseTable, SimConfig, TableId, DEFAULT_SEED,
};
use crate::linear_models::CovariateSet;
use crate::propensity::{BoostingPath, GbmProfile};
use crate::weighting::{BalanceReference, BalanceSpec, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableChoice {
    Table1,
    Table2,
    Both,
}

impl TableChoice {
    fn id(&self) -> &'static str {
        match self {
            TableChoice::Table1 => "table1",
            TableChoice::Table2 => "table2",
            TableChoice::Both => "both",
        }
    }

    pub fn tables(&self) -> Vec<TableId> {
        match self {
            TableChoice::Table1 => vec![TableId::Table1],
            TableChoice::Table2 => vec![TableId::Table2],
            TableChoice::Both => vec![TableId::Table1, TableId::Table2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub table: TableChoice,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub gbm_profile: GbmProfile,
    pub ipw_normalized: bool,
    pub weight_cap: Option<f64>,
    pub balance_reference: BalanceReference,
    pub output_format: OutputFormat,
    pub output_path: PathBuf,
    pub only_cell: Option<String>,
    pub interaction_coef: f64,
    /// Write every per-replicate estimate.
    pub estimate_log: bool,
    /// Write per-replicate balance and weight summaries for every fit.
    pub weight_diagnostics: bool,
    /// Number of leading replicates to dump as CSV.
    pub dump_data: usize,
    /// Replicate whose boosted models are dumped as text.
    pub dump_gbm: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            table: TableChoice::Both,
            n: 1000,
            replicates: 1000,
            seed: DEFAULT_SEED,
            gbm_profile: GbmProfile::Desk,
            ipw_normalized: true,
            weight_cap: None,
            balance_reference: BalanceReference::Default,
            output_format: OutputFormat::Csv,
            output_path: PathBuf::from("drsim-out"),
            only_cell: None,
            interaction_coef: DEFAULT_INTERACTION_COEF,
            estimate_log: false,
            weight_diagnostics: false,
            dump_data: 0,
            dump_gbm: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 16] = [
    "table",
    "n",
    "replicates",
    "seed",
    "gbm_profile",
    "ipw_normalized",
    "weight_cap",
    "balance_reference",
    "output_format",
    "output_path",
    "only_cell",
    "interaction_coef",
    "estimate_log",
    "weight_diagnostics",
    "dump_data",
    "dump_gbm",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key}: invalid value `{value}` ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{path}:{line}: expected key=value")]
    Syntax { path: String, line: usize },
    #[error("cannot read config file {path}: {reason}")]
    Read { path: String, reason: String },
    #[error(transparent)]
    Args(#[from] clap::Error),
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn optional(value: &str) -> Option<&str> {
    (!value.is_empty() && value != "none").then_some(value)
}

impl RunConfig {
    /// Sets one key from its text form, checking the value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "table" => {
                self.table = match value {
                    "table1" => TableChoice::Table1,
                    "table2" => TableChoice::Table2,
                    "both" => TableChoice::Both,
                    _ => return Err(invalid(key, value, "expected table1, table2 or both")),
                }
            }
            "n" => {
                let n: usize = parse_num(key, value)?;
                if n < crate::dgp::MIN_SAMPLE_SIZE {
                    return Err(invalid(
                        key,
                        value,
                        format!("must be at least {}", crate::dgp::MIN_SAMPLE_SIZE),
                    ));
                }
                self.n = n;
            }
            "replicates" => {
                let r: usize = parse_num(key, value)?;
                if r == 0 {
                    return Err(invalid(key, value, "must be at least 1"));
                }
                self.replicates = r;
            }
            "seed" => self.seed = parse_num(key, value)?,
            "gbm_profile" => {
                self.gbm_profile = match value {
                    "desk" => GbmProfile::Desk,
                    "full" => GbmProfile::Full,
                    _ => return Err(invalid(key, value, "expected desk or full")),
                }
            }
            "ipw_normalized" => self.ipw_normalized = parse_bool(key, value)?,
            "weight_cap" => {
                self.weight_cap = match optional(value) {
                    None => None,
                    Some(v) => {
                        let cap: f64 = parse_num(key, v)?;
                        if !(cap > 1.0) || !cap.is_finite() {
                            return Err(invalid(key, value, "cap must exceed 1"));
                        }
                        Some(cap)
                    }
                }
            }
            "balance_reference" => {
                self.balance_reference = match value {
                    "default" => BalanceReference::Default,
                    "respondents_vs_nonrespondents" => {
                        BalanceReference::RespondentsVsNonrespondents
                    }
                    _ => {
                        return Err(invalid(
                            key,
                            value,
                            "expected default or respondents_vs_nonrespondents",
                        ))
                    }
                }
            }
            "output_format" => {
                self.output_format = match value {
                    "csv" => OutputFormat::Csv,
                    "markdown" => OutputFormat::Markdown,
                    _ => return Err(invalid(key, value, "expected csv or markdown")),
                }
            }
            "output_path" => {
                if value.is_empty() {
                    return Err(invalid(key, value, "must not be empty"));
                }
                self.output_path = PathBuf::from(value);
            }
            "only_cell" => {
                self.only_cell = match optional(value) {
                    None => None,
                    Some(id) => {
                        find_cell(id, self.ipw_normalized)
                            .map_err(|e| invalid(key, value, e.to_string()))?;
                        Some(id.to_string())
                    }
                }
            }
            "interaction_coef" => {
                let c: f64 = parse_num(key, value)?;
                if !c.is_finite() {
                    return Err(invalid(key, value, "must be finite"));
                }
                self.interaction_coef = c;
            }
            "estimate_log" => self.estimate_log = parse_bool(key, value)?,
            "weight_diagnostics" => self.weight_diagnostics = parse_bool(key, value)?,
            "dump_data" => self.dump_data = parse_num(key, value)?,
            "dump_gbm" => {
                self.dump_gbm = match optional(value) {
                    None => None,
                    Some(v) => Some(parse_num(key, v)?),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                path: source.to_string(),
                line: i + 1,
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let none = || "none".to_string();
        match key {
            "table" => self.table.id().into(),
            "n" => self.n.to_string(),
            "replicates" => self.replicates.to_string(),
            "seed" => self.seed.to_string(),
            "gbm_profile" => self.gbm_profile.id().into(),
            "ipw_normalized" => self.ipw_normalized.to_string(),
            "weight_cap" => self.weight_cap.map_or_else(none, |c| c.to_string()),
            "balance_reference" => self.balance_reference.id().into(),
            "output_format" => match self.output_format {
                OutputFormat::Csv => "csv".into(),
                OutputFormat::Markdown => "markdown".into(),
            },
            "output_path" => self.output_path.display().to_string(),
            "only_cell" => self.only_cell.clone().unwrap_or_else(none),
            "interaction_coef" => self.interaction_coef.to_string(),
            "estimate_log" => self.estimate_log.to_string(),
            "weight_diagnostics" => self.weight_diagnostics.to_string(),
            "dump_data" => self.dump_data.to_string(),
            "dump_gbm" => self.dump_gbm.map_or_else(none, |r| r.to_string()),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key in `key=value` form; parses back to an identical config.
    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# drsim run manifest\n");
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key}={}", self.value_of(key));
        }
        s
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n: self.n,
            replicates: self.replicates,
            seed: self.seed,
            gbm: self.gbm_profile.params(),
            balance_reference: self.balance_reference,
            weight_cap: self.weight_cap,
            interaction_coef: self.interaction_coef,
        }
    }
}

/// Simulation of IPW and doubly robust mean estimators under nonresponse.
///
/// Every flag may also be given as `key=value` in a config file, with
/// underscores in place of dashes; flags win over the file.
#[derive(Debug, Parser)]
#[command(name = "drsim", version)]
pub struct Args {
    /// Flat key=value config file (a run manifest works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// table1, table2 or both.
    #[arg(long)]
    pub table: Option<String>,
    /// Sample size per replicate.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub replicates: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// desk (3000 trees, shrinkage 0.01) or full (10000 trees, shrinkage 0.005).
    #[arg(long)]
    pub gbm_profile: Option<String>,
    /// true for the ratio (Hajek) form of IPW-POP, false for Horvitz-Thompson.
    #[arg(long)]
    pub ipw_normalized: Option<String>,
    /// Cap on POP weights (> 1), applied by flooring propensities; none by default.
    #[arg(long)]
    pub weight_cap: Option<String>,
    /// default or respondents_vs_nonrespondents.
    #[arg(long)]
    pub balance_reference: Option<String>,
    /// csv or markdown.
    #[arg(long)]
    pub output_format: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub output_path: Option<String>,
    /// Run one cell, e.g. table1:gbm:x:ipw-pop:ks-z.
    #[arg(long)]
    pub only_cell: Option<String>,
    /// Coefficient on z1*z2 in the interaction scenario.
    #[arg(long, allow_hyphen_values = true)]
    pub interaction_coef: Option<String>,
    #[arg(long)]
    pub estimate_log: Option<String>,
    #[arg(long)]
    pub weight_diagnostics: Option<String>,
    /// Dump the first N replicates of both scenarios as CSV.
    #[arg(long)]
    pub dump_data: Option<String>,
    /// Dump the boosted models fit on this replicate.
    #[arg(long)]
    pub dump_gbm: Option<String>,
}

impl Args {
    fn flags(&self) -> [(&'static str, &Option<String>); 16] {
        [
            ("table", &self.table),
            ("n", &self.n),
            ("replicates", &self.replicates),
            ("seed", &self.seed),
            ("gbm_profile", &self.gbm_profile),
            ("ipw_normalized", &self.ipw_normalized),
            ("weight_cap", &self.weight_cap),
            ("balance_reference", &self.balance_reference),
            ("output_format", &self.output_format),
            ("output_path", &self.output_path),
            ("only_cell", &self.only_cell),
            ("interaction_coef", &self.interaction_coef),
            ("estimate_log", &self.estimate_log),
            ("weight_diagnostics", &self.weight_diagnostics),
            ("dump_data", &self.dump_data),
            ("dump_gbm", &self.dump_gbm),
        ]
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (key, value) in self.flags() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

pub fn parse_config<I, T>(args: I) -> Result<RunConfig, ConfigError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Args::try_parse_from(args)?.resolve()
}

/// What a run wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub tables: Vec<RmseTable>,
    pub files: Vec<PathBuf>,
}

/// Exit status for a failed run: 2 for an aborted cell, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::CellAborted { .. } | Error::DegenerateReplicate { .. } => 2,
        _ => 1,
    }
}

fn create(path: &Path, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>, Error> {
    files.push(path.to_path_buf());
    Ok(BufWriter::new(File::create(path)?))
}

fn dump_datasets(cfg: &RunConfig, sim: &SimConfig, files: &mut Vec<PathBuf>) -> Result<(), Error> {
    for (interaction, name) in [(false, "data_base.csv"), (true, "data_interaction.csv")] {
        let scenario = sim.scenario(interaction)?;
        let mut w = csv::Writer::from_writer(create(&cfg.output_path.join(name), files)?);
        for r in 0..cfg.dump_data as u64 {
            write_dataset_csv(&mut w, r, &generate_replicate(&scenario, r), r == 0)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn dump_models(
    cfg: &RunConfig,
    sim: &SimConfig,
    r: u64,
    files: &mut Vec<PathBuf>,
) -> Result<(), Error> {
    let ds = generate_replicate(&sim.scenario(false)?, r);
    for covs in [CovariateSet::Z, CovariateSet::X] {
        let path = BoostingPath::train(covs.rows(&ds), &ds.t, &sim.gbm, Some(covs))?;
        let mut w = create(
            &cfg.output_path.join(format!("gbm_r{r}_{}.txt", covs.id())),
            files,
        )?;
        for scheme in [Scheme::Pop, Scheme::Nr] {
            let spec = BalanceSpec {
                scheme,
                reference: sim.balance_reference,
            };
            let (fit, _) = path.select(spec)?;
            writeln!(
                w,
                "# selected trees ({}): {}",
                scheme.id(),
                fit.diagnostics.chosen_iterations.unwrap_or(0)
            )?;
        }
        w.write_all(path.model.dump().as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

/// Runs the configured simulation and writes its outputs under `output_path`.
pub fn run(cfg: &RunConfig) -> Result<RunReport, Error> {
    let sim = cfg.sim_config();
    sim.validate()?;
    let dir = &cfg.output_path;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let mut manifest = create(&dir.join("manifest.txt"), &mut files)?;
    manifest.write_all(cfg.to_manifest().as_bytes())?;
    manifest.flush()?;

    if cfg.dump_data > 0 {
        dump_datasets(cfg, &sim, &mut files)?;
    }
    if let Some(r) = cfg.dump_gbm {
        dump_models(cfg, &sim, r, &mut files)?;
    }

    let cells: Vec<CellSpec> = match &cfg.only_cell {
        Some(id) => vec![find_cell(id, cfg.ipw_normalized)?],
        None => cfg
            .table
            .tables()
            .into_iter()
            .flat_map(|t| table_cells(t, cfg.ipw_normalized))
            .collect(),
    };
    let show = std::io::stderr().is_terminal();
    let out = run_cells_with_progress(&cells, &sim, |done, total| {
        if show && (done % 10 == 0 || done == total) {
            eprint!("\r{done}/{total} replicates");
            if done == total {
                eprintln!();
            }
        }
    })?;

    write_diagnostics_csv(
        create(&dir.join("diagnostics.csv"), &mut files)?,
        &out.cells,
    )?;
    if cfg.estimate_log {
        write_estimate_log(create(&dir.join("estimates.csv"), &mut files)?, &out.cells)?;
    }
    if cfg.weight_diagnostics {
        write_weight_diagnostics(create(&dir.join("weights.csv"), &mut files)?, &out.fits)?;
    }
    if let Some(cell) = out.cells.first().filter(|_| cfg.only_cell.is_some()) {
        let mut w = csv::Writer::from_writer(create(&dir.join("cell.csv"), &mut files)?);
        w.write_record(["replicate", "cell_id", "value"])?;
        for (r, v) in cell.values.iter().enumerate() {
            w.write_record([
                r.to_string(),
                cell.cell.id(),
                v.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    if let Some(err) = out.first_abort() {
        return Err(err);
    }

    let mut tables = Vec::new();
    if cfg.only_cell.is_none() {
        for t in cfg.table.tables() {
            let table = RmseTable::assemble(t, &out.cells)?;
            match cfg.output_format {
                OutputFormat::Csv => {
                    table.write_csv(create(&dir.join(format!("{}.csv", t.id())), &mut files)?)?
                }
                OutputFormat::Markdown => {
                    let mut w = create(&dir.join(format!("{}.md", t.id())), &mut files)?;
                    w.write_all(table.to_markdown().as_bytes())?;
                    w.flush()?;
                }
            }
            tables.push(table);
        }
    }
    Ok(RunReport { tables, files })
}
