use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design matrix is rank deficient; collinear column(s): {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("column labels differ from the fitting design: expected [{}], got [{}]", .expected.join(", "), .found.join(", "))]
    ColumnMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("response indicator has a single class ({responders} of {n} responded)")]
    SingleClass { responders: usize, n: usize },

    #[error("propensity score {value} at unit {unit} is outside (0, 1)")]
    PropensityOutOfRange { unit: usize, value: f64 },

    #[error("total weight is zero: {0}")]
    ZeroWeight(String),

    #[error("requested {requested} trees but the model has {available}")]
    TreeIndexOutOfRange { requested: usize, available: usize },

    #[error("estimate is not finite ({0})")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cell {cell} aborted: {failures} of {replicates} replicates failed (last error: {last_error})")]
    CellAborted {
        cell: String,
        failures: usize,
        replicates: usize,
        last_error: String,
    },

    #[error("degenerate replicate {replicate}: {responders} of {n} units responded")]
    DegenerateReplicate {
        replicate: u64,
        responders: usize,
        n: usize,
    },

    #[error("unknown cell id `{0}`")]
    UnknownCell(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
