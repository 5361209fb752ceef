use thiserror::Error;

pub type Result<T, E = VitlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VitlError {
    #[error("data: column `{0}` not found")]
    MissingColumn(String),

    #[error("data: row {row}, column `{column}`: {reason}")]
    Ingestion {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("data: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("size: {0}")]
    Size(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("parameter: {0}")]
    Parameter(String),

    #[error("numeric: non-finite value in {0}")]
    Numeric(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("step t={t} violates positivity; admissible bound is t < {bound}")]
    Step { t: f64, bound: f64 },
}
