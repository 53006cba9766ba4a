use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, R2iveError>;

#[derive(Debug, Error)]
pub enum R2iveError {
    #[error("input error: {0}")]
    Input(String),

    #[error("schema error: column `{column}` not found in {path}")]
    MissingColumn { column: String, path: PathBuf },

    #[error("parse error at row {row}, column `{column}`: cannot parse {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("degenerate first stage: {0}")]
    DegenerateFirstStage(String),

    #[error("collinear regressors: {}", columns.join(", "))]
    Collinear { columns: Vec<String> },

    #[error("tuning failed: no grid point converged ({})", failed.join("; "))]
    Tuning { failed: Vec<String> },

    #[error("simulation config error: {0}")]
    Config(String),

    #[error("harness error: {failures} of {reps} replications failed")]
    Harness { failures: usize, reps: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
