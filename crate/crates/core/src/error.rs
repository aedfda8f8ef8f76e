use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("record {record}: {reason}")]
    Record { record: usize, reason: String },

    #[error("dense table: {0}")]
    Table(String),

    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("derived count for variable {variable} cell ({row}, {col}) is negative ({value}); dataset is corrupted")]
    NegativeDerivedCount {
        variable: usize,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("zero parameter {0}; use a positive prior strength (MAP) to smooth")]
    ZeroParameter(String),

    #[error("record {0} has zero probability under every cluster; cannot normalize")]
    Underflow(usize),

    #[error("cluster {0} received no expected records; ML M-step undefined, use prior strength > 0")]
    EmptyCluster(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid counts: {0}")]
    Counts(String),

    #[error("dense and sparse outputs disagree: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
