use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate row for entity {entity:?}, period {period:?}")]
    DuplicateRow { entity: String, period: String },

    #[error("non-numeric value {value:?} in column {column:?} at line {line}")]
    NonNumeric {
        column: String,
        line: usize,
        value: String,
    },

    #[error("{count} row(s) rejected for missing required fields: {}", summarize_lines(.lines))]
    MissingFields { count: usize, lines: Vec<usize> },

    #[error("panel too small: {0}")]
    TooSmall(String),

    #[error("empty panel: {0}")]
    EmptyPanel(String),

    #[error("column {0:?} has zero variance")]
    ZeroVariance(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is rank deficient; dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("degenerate treatment residual: |sum v_hat * tau| = {denominator:e} <= {threshold:e}")]
    DegenerateTreatment { denominator: f64, threshold: f64 },

    #[error("score not zero at the estimate: |sum psi| = {residual:e} on {n} rows")]
    ScoreNotZero { residual: f64, n: usize },

    #[error("{failed} of {total} repetitions failed; first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn summarize_lines(lines: &[usize]) -> String {
    const SHOWN: usize = 10;
    let mut s = lines
        .iter()
        .take(SHOWN)
        .map(|l| format!("line {l}"))
        .collect::<Vec<_>>()
        .join(", ");
    if lines.len() > SHOWN {
        s.push_str(&format!(" and {} more", lines.len() - SHOWN));
    }
    s
}
