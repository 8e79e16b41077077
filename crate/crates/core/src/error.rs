use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("cannot parse `{value}` in column `{column}` (row {row})")]
    Parse {
        column: String,
        row: usize,
        value: String,
    },
    #[error("non-finite {what} in row {row}")]
    NonFinite { what: &'static str, row: usize },
    #[error("treatment level {0} has no rows")]
    EmptyLevel(usize),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("invalid contrast ({0}, {1})")]
    InvalidPair(usize, usize),
    #[error("degenerate group: {0}")]
    DegenerateGroup(String),
    #[error("level {level} has {available} rows, fewer than the {needed} matches requested")]
    TooFewDonors {
        level: usize,
        available: usize,
        needed: usize,
    },
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
